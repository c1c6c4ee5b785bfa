import csv
import json

import numpy as np
import pytest

from zsdfa import ablation as A
from zsdfa.bench import DatasetSplit, build_protocol
from zsdfa.errors import ConfigError
from zsdfa.model import EncoderConfig, ModuleFlags
from zsdfa.train import LossFlags, TrainConfig, batch_from_samples


class TestGrids:
    @pytest.mark.parametrize("grid,n", [("modules", 11), ("losses", 5), ("lambda", 4), ("margin", 3), ("mmi", 2)])
    def test_row_counts(self, grid, n):
        rows = A.resolve_rows(grid)
        assert len(rows) == n and len({r.name for r in rows}) == n

    def test_grid_values(self):
        assert [r.lam for r in A.grid_rows("lambda")] == [0.0, 0.3, 0.5, 0.7]
        assert [r.margin for r in A.grid_rows("margin")] == [0.5, 0.7, 0.9]

    def test_ae_only_row(self):
        row = A.grid_rows("modules")[0]
        assert row.name == "AE"
        assert row.modules == ModuleFlags(ae=True, ne=False, ee=False, pe=False, le=False)
        assert row.losses == LossFlags(dfa=True, dfacc=True, cmc=False, dcpc=False, kl=False)

    def test_full_module_row_last(self):
        last = A.grid_rows("modules")[-1]
        assert last.modules == ModuleFlags() and last.losses == LossFlags()

    def test_losses_cumulative(self):
        enabled = [r.losses.enabled() for r in A.grid_rows("losses")]
        assert enabled == [["dfa"], ["dfa", "dfacc"], ["dfa", "dfacc", "cmc"], ["dfa", "dfacc", "cmc", "dcpc"],
                           ["dfa", "dfacc", "cmc", "dcpc", "kl"]]

    def test_conflict_explained(self):
        with pytest.raises(ConfigError, match="dcpc.*pe"):
            A.resolve_rows(rows=[{"name": "bad", "modules": {"pe": False}, "losses": {"dcpc": True}}])

    def test_unspecified_losses_follow_modules(self):
        (row,) = A.resolve_rows(rows=[{"name": "no le", "modules": {"le": False}}])
        assert not row.losses.cmc and not row.losses.kl and row.losses.dcpc

    def test_empty_and_duplicates(self):
        with pytest.raises(ConfigError, match="empty"):
            A.resolve_rows()
        with pytest.raises(ConfigError, match="unique"):
            A.resolve_rows(rows=[{"name": "x"}, {"name": "x"}])
        with pytest.raises(ConfigError):
            A.resolve_rows("nonsense")

    def test_row_roundtrip(self):
        for row in A.grid_rows("modules") + A.grid_rows("lambda"):
            assert A.AblationRow.from_dict(row.to_dict()) == row


def test_median_rows():
    res = [{"config": "a", "seed": s, "seen_acc": v, "unseen_acc@0.7": v / 2, "unseen_acc@0.9": v / 4}
           for s, v in enumerate([0.2, 0.9, 0.5])]
    (med,) = A.median_rows(res, ["a"])
    assert med["seed"] == "median" and med["seen_acc"] == 0.5 and med["unseen_acc@0.9"] == 0.125


@pytest.fixture(scope="module")
def tiny():
    split = DatasetSplit(seen_families=["real", "stylegan_a"], unseen_families=["ldm_b"],
                         train_count=4, test_count=3, size=32)
    train_s, test_s = build_protocol(split, 0)
    enc = EncoderConfig(size=32, patch=16, d=16, heads=2, channels=(4, 8), x=2, b_max=4)
    return split, train_s, test_s, enc


def test_run_and_cache(tiny, tmp_path):
    split, train_s, test_s, enc = tiny
    rows = A.resolve_rows(rows=[{"name": "dfa only", "losses": {"dfacc": False, "cmc": False, "dcpc": False,
                                                                "kl": False}},
                                {"name": "AE", "modules": {"ne": False, "ee": False, "pe": False, "le": False}}])
    args = (rows, [0, 1], enc, TrainConfig(epochs=1, batch_size=4), batch_from_samples(train_s, 16),
            batch_from_samples(test_s, 16), [s.family for s in test_s], split.effective_seen(),
            split.unseen_families, tmp_path)
    res = A.run_ablation(*args, data_key="d1")
    assert len(res) == 2 * 2 + 2
    assert [r["seed"] for r in res[-2:]] == ["median", "median"]
    for r in res:
        assert 0.0 <= r["seen_acc"] <= 1.0 and r["unseen_acc@0.9"] >= r["unseen_acc@0.7"]
    assert (tmp_path / "dfa_only" / "seed1" / "best.ckpt").exists()

    stamp = (tmp_path / "AE" / "seed0" / "result.json").stat().st_mtime_ns
    assert A.run_ablation(*args, data_key="d1") == res
    assert (tmp_path / "AE" / "seed0" / "result.json").stat().st_mtime_ns == stamp
    # a different dataset invalidates the cache
    A.run_ablation(*args, data_key="d2")
    rec = json.loads((tmp_path / "AE" / "seed0" / "result.json").read_text())
    assert rec["key"]["data"] == "d2" and rec["train_seconds"] > 0

    paths = A.write_results(res, rows, tmp_path)
    with open(paths[0]) as f:
        table = list(csv.reader(f))
    assert tuple(table[0]) == A.RESULT_FIELDS
    assert [r[:2] for r in table[1:]] == [["dfa only", "0"], ["dfa only", "1"], ["dfa only", "median"],
                                          ["AE", "0"], ["AE", "1"], ["AE", "median"]]
    md = paths[1].read_text().splitlines()
    assert len(md) == 4 and md[2].startswith("| dfa only |")


def test_needs_seeds(tiny, tmp_path):
    split, train_s, test_s, enc = tiny
    with pytest.raises(ConfigError):
        A.run_ablation(A.resolve_rows("mmi"), [], enc, TrainConfig(), None, None, [], [], [], tmp_path)


def test_module_markdown_layout():
    rows = A.grid_rows("modules")
    res = [{"config": r.name, "seed": "median", "seen_acc": 1.0, "unseen_acc@0.7": 0.5, "unseen_acc@0.9": 0.6}
           for r in rows]
    lines = A.markdown_table(res, rows, "modules").splitlines()
    assert lines[0] == "| AE | NE | EE | PE | LE | Seen ACC | Unseen ACC (0.9) |"
    assert len(lines) == 2 + 11
    assert lines[2] == "| ✓ |  |  |  |  | 100.00 | 60.00 |"
    assert lines[-1].count("✓") == 5
