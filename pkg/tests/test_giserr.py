import numpy as np
import pytest
from scipy import stats

from cgsar.cloud import ViewGeometry
from cgsar.giserr import Offset, OffsetModel, apply_offsets, sample_offsets, shift_mask, write_offsets_csv
from cgsar.sargeo import SPACING_AZ, SPACING_RG, MaskStack, SarFrame


def test_offset_statistics():
    offs = sample_offsets(OffsetModel(seed=3), 10_000)
    mags = np.array([o.magnitude for o in offs])
    assert np.all(mags >= 0)
    assert abs(mags.mean() - 4.13) <= 0.10
    sectors = np.bincount(np.array([o.alpha for o in offs]) // 30, minlength=12)
    sigma = np.sqrt(10_000 / 12 * (1 - 1 / 12))
    assert np.all(np.abs(sectors - 10_000 / 12) <= 5 * sigma)
    assert stats.chisquare(np.bincount([o.alpha for o in offs], minlength=360)).pvalue > 0.01


def test_same_seed_same_offsets():
    assert sample_offsets(OffsetModel(seed=1), 50) == sample_offsets(OffsetModel(seed=1), 50)


def test_offset_pixels():
    assert Offset(4.13, 0).pixels(SPACING_RG, SPACING_AZ) == (9, 0)
    assert Offset(4.13, 90).pixels(SPACING_RG, SPACING_AZ) == (0, 5)


def test_invalid_model():
    with pytest.raises(ValueError):
        OffsetModel(mu=-1.0)


def test_shift_mask_moves_and_clips():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    assert shift_mask(m, 1, -2)[0, 3]
    assert not shift_mask(m, 10, 0).any()


def _stack():
    f = SarFrame(SPACING_AZ, SPACING_RG, ViewGeometry(), 0.0, 0.0, 40, 30)
    a = np.zeros(f.shape, bool)
    a[10:15, 10:20] = True
    return MaskStack(f, {"a": a, "b": np.roll(a, 5, axis=0)})


def test_zero_offset_is_identity():
    s = _stack()
    out, _ = apply_offsets(s, OffsetModel(), [Offset(0.0, 37), Offset(0.0, 200)])
    assert all(np.array_equal(out[k], s[k]) for k in s.ids())


def test_apply_offsets_shift_and_flag(tmp_path):
    s = _stack()
    out, used = apply_offsets(s, OffsetModel(), [Offset(4.13, 0), Offset(500.0, 0)])
    assert np.array_equal(out["a"], np.roll(s["a"], 9, axis=1))
    assert "b" in out.flags
    write_offsets_csv(tmp_path / "o.csv", used)
    assert (tmp_path / "o.csv").read_text().splitlines()[0] == "id,magnitude,alpha"
    with pytest.raises(ValueError):
        apply_offsets(s, OffsetModel(), [Offset(1.0, 0)])
