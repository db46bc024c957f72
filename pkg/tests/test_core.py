import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ucan.core import (
    TASKS,
    TRACERS,
    ConfigError,
    MissingModalityError,
    NormRecord,
    ShapeMismatchError,
    Study,
    TrainConfig,
    TracerId,
    ValidationError,
    Volume,
    ordinal,
    parse_task,
    task_name,
    tracer_from_ordinal,
)


def test_ordinal_mapping_is_fixed():
    assert [ordinal(t) for t in TRACERS] == [0, 1, 2]
    assert [t.ordinal for t in (TracerId.A, TracerId.B, TracerId.C)] == [0, 1, 2]
    assert len(TracerId) == 3


@pytest.mark.parametrize("t", list(TracerId))
def test_ordinal_roundtrip(t):
    assert tracer_from_ordinal(ordinal(t)) is t


@pytest.mark.parametrize("bad", [-1, 3, 7])
def test_bad_ordinal(bad):
    with pytest.raises(ValidationError):
        tracer_from_ordinal(bad)


def test_parse_accepts_names_and_ordinals():
    assert TracerId.parse("b") is TracerId.B
    assert TracerId.parse(2) is TracerId.C
    with pytest.raises(ValidationError):
        TracerId.parse("D")


def test_tasks_in_table_order():
    assert [task_name(s, t) for s, t in TASKS] == ["A->B", "A->C", "B->A", "B->C", "C->A", "C->B"]
    assert all(parse_task(task_name(s, t)) == (s, t) for s, t in TASKS)


def test_volume_rejects_nonfinite():
    d = np.ones((2, 2, 2))
    d[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        Volume(d)
    d[0, 0, 0] = np.inf
    with pytest.raises(ValidationError):
        Volume(d)


def test_volume_shape_and_voxel_checks():
    with pytest.raises(ShapeMismatchError):
        Volume(np.ones((2, 2)))
    with pytest.raises(ValidationError):
        Volume(np.ones((2, 2, 2)), (1.0, 0.0, 1.0))
    v = Volume(np.arange(8.0).reshape(2, 2, 2), (1.2, 1.055, 1.055))
    assert v.shape == (2, 2, 2)
    assert v.voxel_size_mm == (1.2, 1.055, 1.055)
    assert not v.data.flags.writeable


def test_volume_equality_is_elementwise():
    a = Volume(np.zeros((2, 3, 4)))
    assert a == Volume(np.zeros((2, 3, 4)))
    assert a != Volume(np.ones((2, 3, 4)))
    assert a != Volume(np.zeros((2, 3, 4)), (2.0, 1.0, 1.0))


def test_norm_record_validation():
    assert NormRecord.from_dict(NormRecord(3.5).to_dict()) == NormRecord(3.5)
    for bad in (0.0, -1.0, float("nan"), float("inf")):
        with pytest.raises(ValueError):
            NormRecord(bad)


def _study(**overrides):
    v = Volume(np.ones((4, 4, 4)))
    kw = dict(id="x", pet={t: v for t in TRACERS}, mr=v, roi_masks={})
    kw.update(overrides)
    return Study(**kw)


def test_study_requires_every_tracer():
    v = Volume(np.ones((4, 4, 4)))
    with pytest.raises(MissingModalityError, match="C"):
        _study(pet={TracerId.A: v, TracerId.B: v})


def test_study_rejects_shape_mismatch_and_nonbinary_mask():
    with pytest.raises(ShapeMismatchError):
        _study(mr=Volume(np.ones((4, 4, 5))))
    with pytest.raises(ShapeMismatchError):
        _study(mr=Volume(np.ones((4, 4, 4)), (2.0, 1.0, 1.0)))
    with pytest.raises(ValidationError, match="binary"):
        _study(roi_masks={"r": Volume(np.full((4, 4, 4), 0.5))})


def test_study_fills_norm_records():
    s = _study(pet={t: Volume(np.full((4, 4, 4), float(i + 1))) for i, t in enumerate(TRACERS)})
    assert [s.norm_records[t].max_value for t in TRACERS] == [1.0, 2.0, 3.0]


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.alpha_clsf, cfg.alpha_adv, cfg.alpha_rec) == (0.1, 0.1, 0.5)
    assert cfg.num_folds == 5


def test_config_roundtrip(tmp_path):
    cfg = TrainConfig(epochs=3, patch_shape=(32, 48, 64), depth=3, data_dir="d")
    assert TrainConfig.from_json(cfg.to_json()) == cfg
    cfg.save(tmp_path / "c.json")
    assert TrainConfig.load(tmp_path / "c.json") == cfg
    assert json.loads((tmp_path / "c.json").read_text())["patch_shape"] == [32, 48, 64]


def test_config_hash_ignores_paths():
    assert TrainConfig(data_dir="a").hash() == TrainConfig(run_dir="b").hash()
    assert TrainConfig(seed=1).hash() != TrainConfig(seed=2).hash()


def test_config_reports_every_bad_field():
    with pytest.raises(ConfigError) as exc:
        TrainConfig.from_dict({"alpha_adv": -1, "lr_g": 0, "patch_shape": [30, 32, 32], "bogus": 1})
    assert {"alpha_adv", "lr_g", "patch_shape", "bogus"} <= set(exc.value.errors)


def test_config_type_errors_name_the_field():
    with pytest.raises(ConfigError) as exc:
        TrainConfig.from_dict({"epochs": "ten"})
    assert "epochs" in exc.value.errors


@given(st.integers(0, 2))
def test_ordinal_bijection(i):
    assert ordinal(tracer_from_ordinal(i)) == i
