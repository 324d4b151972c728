import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decompseg import episodes as E
from decompseg.errors import BadMagicError, ContractError, FormatError, TruncatedError, VersionError


SMALL = E.DomainSpec(seed=5, image_size=(24, 24))


@pytest.fixture(scope="module")
def small_domain():
    return E.generate_domain(SMALL, 4, 3)


def test_splitmix_first_output():
    assert E.SplitMix64(0).next_u64() == 0xE220A8397B1DCDAF


def test_fnv1a_reference_values():
    assert E.fnv1a64("") == 0xCBF29CE484222325
    assert E.fnv1a64("a") == 0xAF63DC4C8601EC8C


def test_derive_seed_separates_tags():
    assert E.derive_seed(1, "a") != E.derive_seed(1, "b")
    assert E.derive_seed(1, "a") == E.derive_seed(1, "a")


@given(st.integers(1, 50), st.integers(0, 2**64 - 1))
def test_integers_in_range(n, seed):
    rng = E.SplitMix64(seed)
    assert all(0 <= rng.integers(n) < n for _ in range(20))


def test_render_is_deterministic():
    a = E.render_sample(SMALL, 3, 7)
    b = E.render_sample(SMALL, 3, 7)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_domain_is_deterministic(small_domain):
    again = E.generate_domain(SMALL, 4, 3)
    assert small_domain.equals(again)
    assert E.encode_dataset(small_domain) == E.encode_dataset(again)


def test_same_spec_writes_identical_files(tmp_path, small_domain):
    E.write_dataset(small_domain, tmp_path / "a.epds")
    E.write_dataset(E.generate_domain(SMALL, 4, 3), tmp_path / "b.epds")
    assert (tmp_path / "a.epds").read_bytes() == (tmp_path / "b.epds").read_bytes()


def test_zero_clutter_background_is_flat():
    spec = E.DomainSpec(seed=2, clutter_density=0.0)
    img, mask, owner = E.render_sample(spec, 0, 0)
    bg = img[0][owner == 0]
    assert bg.size and np.all(bg == bg[0])


def test_mask_owner_audit(small_domain):
    for rec, owner in zip(small_domain.records, small_domain.owners):
        assert np.array_equal(rec.mask == 1, owner > 0)
        assert set(np.unique(rec.mask)) <= {0, 1}


def test_foreground_fraction_bounds(small_domain):
    for rec in small_domain.records:
        assert 0.06 <= rec.mask.mean() <= 0.6


def test_restyle_keeps_geometry():
    other = E.restyle(SMALL, palette_rotation=0.3, texture_offset=0.1, clutter_density=0.6)
    for index in range(3):
        a = E.render_sample(SMALL, 1, index)
        b = E.render_sample(other, 1, index)
        assert np.array_equal(a[1], b[1])
        assert not np.array_equal(a[0], b[0])


def test_target_labels_disjoint(small_domain):
    target = E.generate_domain(E.DomainSpec(seed=9, image_size=(24, 24), class_offset=1000), 4, 3)
    assert not set(small_domain.class_ids()) & set(target.class_ids())
    assert target.class_ids() == [1000, 1001, 1002, 1003]


def test_generate_domain_preconditions():
    with pytest.raises(ContractError):
        E.generate_domain(SMALL, 1, 3)
    with pytest.raises(ContractError):
        E.generate_domain(SMALL, 2, 1)


def test_episode_determinism_and_structure(small_domain):
    a = E.sample_episode(small_domain, 1, 42)
    b = E.sample_episode(small_domain, 1, 42)
    assert a.indices == b.indices and a.class_id == b.class_id
    assert a.shots == 1 and len(set(a.indices)) == 2
    assert all(small_domain.records[i].class_id == a.class_id for i in a.indices)


def test_pigeonhole_query(small_domain):
    ep = E.sample_episode(small_domain, 2, 3)
    members = set(small_domain.by_class()[ep.class_id])
    assert members == set(ep.indices)


def test_episode_preconditions(small_domain):
    with pytest.raises(ContractError):
        E.sample_episode(small_domain, 0, 1)
    with pytest.raises(ContractError):
        E.sample_episode(small_domain, 3, 1)


def test_class_frequencies_uniform():
    # uniform class draw over 4 classes: counts ~ Multinomial(10⁴, 1/4)
    records = [E.Sample(c, np.zeros((1, 2, 2), np.float32), np.zeros((2, 2), np.uint8))
               for c in range(4) for _ in range(2)]
    ds = E.Dataset(records)
    n = 10_000
    counts = np.zeros(4)
    for s in E.episode_seeds(0, n):
        counts[E.sample_episode(ds, 1, s).class_id] += 1
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / 4) < 3 * sigma)


def test_round_trip(small_domain, tmp_path):
    path = tmp_path / "d.epds"
    E.write_dataset(small_domain, path)
    assert E.read_dataset(path).equals(small_domain)


def golden_bytes():
    # one record: class 7, 2×2, one channel
    header = b"EPDS" + struct.pack("<I", 1) + struct.pack("<I", 1)
    record = struct.pack("<I", 7) + struct.pack("<H", 2) + struct.pack("<H", 2) + bytes([1])
    pixels = b"".join(struct.pack("<f", v) for v in (0.0, 0.25, 0.5, 1.0))
    return header + record + pixels + bytes([0, 1, 1, 0])


def test_golden_file():
    ds = E.decode_dataset(golden_bytes())
    (rec,) = ds.records
    assert rec.class_id == 7
    assert rec.image.tolist() == [[[0.0, 0.25], [0.5, 1.0]]]
    assert rec.mask.tolist() == [[0, 1], [1, 0]]
    assert E.encode_dataset(ds) == golden_bytes()


def test_bad_magic_at_offset_zero():
    with pytest.raises(BadMagicError) as err:
        E.decode_dataset(b"EPDX" + golden_bytes()[4:])
    assert err.value.offset == 0


def test_unknown_version():
    blob = bytearray(golden_bytes())
    blob[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError) as err:
        E.decode_dataset(bytes(blob))
    assert err.value.offset == 4


@pytest.mark.parametrize("cut", [6, 12, 20, 30, 36])
def test_truncation(cut):
    with pytest.raises(TruncatedError):
        E.decode_dataset(golden_bytes()[:cut])


def test_bad_mask_value_and_trailing_bytes():
    blob = bytearray(golden_bytes())
    blob[-1] = 2
    with pytest.raises(FormatError) as err:
        E.decode_dataset(bytes(blob))
    assert err.value.offset == len(blob) - 1
    with pytest.raises(FormatError):
        E.decode_dataset(golden_bytes() + b"\0")
