from __future__ import annotations

import filecmp

from conftest import DEMO_STORE
from tracellm.benchmark import MAX_ATTACK_PATHS, generate_benchmark
from tracellm.devchain import write_demo_fixtures


def test_committed_fixtures_are_reproducible(tmp_path):
    write_demo_fixtures(tmp_path)
    cmp = filecmp.dircmp(DEMO_STORE, tmp_path)

    def diffs(c):
        out = c.left_only + c.right_only + c.diff_files + c.funny_files
        for sub in c.subdirs.values():
            out += diffs(sub)
        return out

    assert diffs(cmp) == []
    for path in DEMO_STORE.rglob("*.json"):
        assert path.read_bytes() == (tmp_path / path.relative_to(DEMO_STORE)).read_bytes()


def test_benchmark_is_seeded_and_labeled():
    a = generate_benchmark(3, seed=11)
    b = generate_benchmark(3, seed=11)
    assert [r.to_json() for r in a.rows()] == [r.to_json() for r in b.rows()]
    for inc in a.incidents:
        assert 0 < inc.attack_path_count <= MAX_ATTACK_PATHS
        keys = [r.path_key for r in inc.rows()]
        assert len(keys) == len(set(keys))
    assert generate_benchmark(3, seed=12).rows() != a.rows()
