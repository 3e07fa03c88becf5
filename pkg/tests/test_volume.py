import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from angiosynth.oracles import flood_fill_components
from angiosynth.volume import (BadMagicError, NonFiniteVolumeError, PhantomSpec,
                               TruncatedVolumeError, Volume3D, VolumeFormatError, extract_slices,
                               from_bytes, generate_phantom, load_volume, save_volume,
                               stack_slices, to_bytes)


def _vol(seed=0, dims=(4, 8, 8), spacing=(1.0, 0.5, 0.25)):
    rng = np.random.default_rng(seed)
    return Volume3D(rng.normal(size=dims).astype(np.float32), spacing)


# ---------------------------------------------------------------- Volume3D + VVOL


def test_round_trip_file(tmp_path):
    v = _vol()
    save_volume(v, tmp_path / "a.vvol")
    w = load_volume(tmp_path / "a.vvol")
    assert w == v
    assert w.spacing == v.spacing
    assert w.voxels.tobytes() == v.voxels.tobytes()


def test_header_layout():
    v = _vol(dims=(2, 3, 4), spacing=(1.5, 2.0, 2.5))
    buf = to_bytes(v)
    assert buf[:8] == b"VVOL0001"
    assert struct.unpack("<3I", buf[8:20]) == (2, 3, 4)
    assert struct.unpack("<3d", buf[20:44]) == (1.5, 2.0, 2.5)
    assert len(buf) == 44 + 4 * 24
    assert np.array_equal(np.frombuffer(buf[44:], "<f4").reshape(2, 3, 4), v.voxels)


def test_wrong_magic():
    buf = bytearray(to_bytes(_vol()))
    buf[:8] = b"NOTAVOL!"
    with pytest.raises(BadMagicError):
        from_bytes(bytes(buf))


def test_truncated_payload():
    header = b"VVOL0001" + struct.pack("<3I3d", 2, 2, 2, 1.0, 1.0, 1.0)
    with pytest.raises(TruncatedVolumeError):
        from_bytes(header + np.zeros(7, "<f4").tobytes())


def test_truncated_header():
    with pytest.raises(TruncatedVolumeError):
        from_bytes(b"VVOL0001" + b"\x00" * 5)


def test_non_finite_payload():
    header = b"VVOL0001" + struct.pack("<3I3d", 1, 1, 2, 1.0, 1.0, 1.0)
    with pytest.raises(NonFiniteVolumeError):
        from_bytes(header + np.array([1.0, np.nan], "<f4").tobytes())


def test_trailing_bytes_rejected():
    with pytest.raises(VolumeFormatError):
        from_bytes(to_bytes(_vol()) + b"\x00")


def test_load_errors_are_distinct():
    assert len({BadMagicError, TruncatedVolumeError, NonFiniteVolumeError}) == 3
    for cls in (BadMagicError, TruncatedVolumeError, NonFiniteVolumeError):
        assert issubclass(cls, VolumeFormatError)


def test_volume_invariants():
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2, 2), np.float32), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        Volume3D(np.full((2, 2, 2), np.inf, np.float32))


@given(st.tuples(*[st.integers(1, 5)] * 3), st.integers(0, 2 ** 32 - 1))
def test_round_trip_is_bijection(dims, seed):
    v = _vol(seed, dims)
    assert from_bytes(to_bytes(v)) == v
    assert to_bytes(from_bytes(to_bytes(v))) == to_bytes(v)


# ---------------------------------------------------------------- slices


def test_extract_z_shapes():
    sl = extract_slices(_vol(dims=(4, 8, 8)), "z")
    assert len(sl) == 4 and all(s.shape == (8, 8) for s in sl)


@pytest.mark.parametrize("axis", ["z", "y", "x"])
def test_slices_reassemble(axis):
    v = _vol(dims=(3, 5, 7))
    sl = extract_slices(v, axis)
    assert len(sl) == {"z": 3, "y": 5, "x": 7}[axis]
    assert stack_slices(sl, axis, v.spacing) == v


def test_constant_volume_slices_constant():
    v = Volume3D(np.full((3, 4, 4), 0.5, np.float32))
    for axis in "zyx":
        assert all(np.all(s == 0.5) for s in extract_slices(v, axis))


def test_bad_axis():
    with pytest.raises((KeyError, ValueError)):
        extract_slices(_vol(), "w")


# ---------------------------------------------------------------- phantoms


def test_phantom_deterministic():
    a = generate_phantom(PhantomSpec(seed=7))
    b = generate_phantom(PhantomSpec(seed=7))
    for f in ("non_angio", "angio", "vessel_mask"):
        assert to_bytes(getattr(a, f)) == to_bytes(getattr(b, f))


def test_phantom_zero_noise_matches_mask():
    spec = PhantomSpec(noise_sigma=0.0, vessel_contrast_angio=1.0, background=0.0, seed=2)
    p = generate_phantom(spec)
    assert set(np.unique(p.angio.voxels)) <= {0.0, 1.0}
    assert np.array_equal(p.angio.voxels, p.vessel_mask.voxels)


def test_phantom_single_component_seed3():
    p = generate_phantom(PhantomSpec(dims=(32, 32, 32), branch_count=5, seed=3))
    assert flood_fill_components(p.vessel_mask.voxels) == 1


def test_phantom_pair_invariants():
    p = generate_phantom(PhantomSpec(seed=11))
    m = p.vessel_mask.voxels
    assert set(np.unique(m)) == {0.0, 1.0}
    assert p.angio.dims == p.non_angio.dims == p.vessel_mask.dims
    a = p.angio.voxels
    assert a[m == 1].mean() > a[m == 0].mean()
    assert p.non_angio.voxels[m == 1].mean() < a[m == 1].mean()
    assert 0.0 <= a.min() and a.max() <= 1.0


@pytest.mark.parametrize("bad", [
    dict(radius_range=(2.0, 1.0)),
    dict(radius_range=(0.0, 1.0)),
    dict(dims=(4, 32, 32)),
    dict(dims=(32, 8, 8), radius_range=(1.0, 2.5)),
    dict(vessel_contrast_angio=0.1, vessel_contrast_nonangio=0.2),
    dict(branch_count=0),
    dict(noise_sigma=-0.1),
])
def test_phantom_spec_rejected(bad):
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(**bad))


def test_phantom_connectivity_over_50_seeds():
    for seed in range(50):
        p = generate_phantom(PhantomSpec(dims=(24, 24, 24), seed=seed, radius_range=(1.0, 2.0)))
        assert flood_fill_components(p.vessel_mask.voxels) == 1, seed
