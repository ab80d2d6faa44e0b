from pathlib import Path

import pytest

from hsvlt.core.config import with_overrides
from hsvlt.core.errors import ConfigError
from hsvlt.core.output_builder import ablation_table
from hsvlt.services.sweep_service import ablation_rows, ablation_sweep, sweep_service


@pytest.mark.parametrize("axis, count", [
    ("ivla_kernel", 4),
    ("ivla_toggles", 5),
    ("csa_variant", 3),
    ("csa_stages", 5),
    ("csa_features", 3),
    ("embedding", 3),
])
def test_row_counts(axis, count):
    assert len(ablation_rows(axis)) == count


def test_row_labels():
    assert [r.label for r in ablation_rows("ivla_kernel")] == ["3x3", "5x5", "7x7", "11x11"]
    assert [r.label for r in ablation_rows("csa_stages")] == ["{4}", "{3,4}", "{1,2,3}", "{2,3,4}", "{1,2,3,4}"]
    assert ablation_rows("ivla_toggles")[-1].overrides == {
        "use_gconv": True, "use_l_act": True, "use_v_gate": True, "use_l_gate": True,
    }


def test_unknown_axis():
    with pytest.raises(ConfigError):
        ablation_rows("depth")


def test_run_row_applies_overrides(tiny_cfg, tiny_dataset):
    cfg = with_overrides(tiny_cfg, epochs=1)
    row = sweep_service.run_row(cfg, "ivla_kernel", "5x5", {"gconv_kernel": 5}, tiny_dataset, tiny_dataset)
    assert row.report.config["gconv_kernel"] == "5"
    assert row.report.epochs_run == 1
    assert row.label == "5x5"


def test_embedding_sweep_writes_external_table(tmp_path, tiny_cfg, data_dir):
    cfg = with_overrides(tiny_cfg, epochs=1)
    rows = ablation_sweep(cfg, "embedding", data_dir, tmp_path / "out")
    assert [r.label for r in rows] == ["one_hot_projected", "learned_table", "external_file"]
    table = Path(rows[-1].report.config["embedding_file"])
    assert table.is_file()
    assert rows[0].report.config["embedding_file"] == ""


def test_dispatched_rows_match_in_process_rows(eager_celery, tmp_path, tiny_cfg, data_dir):
    cfg = with_overrides(tiny_cfg, epochs=1)
    local = ablation_sweep(cfg, "csa_features", data_dir, tmp_path / "a")
    dispatched = ablation_sweep(cfg, "csa_features", data_dir, tmp_path / "b", workers=2)
    assert [r.label for r in dispatched] == ["L", "S", "S_and_L"]
    assert [r.report.mAP for r in dispatched] == [r.report.mAP for r in local]
    markdown = ablation_table(dispatched)
    assert "S_and_L" in markdown
