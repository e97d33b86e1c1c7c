import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointmtl.data import (
    CohortTable,
    FeatureBag,
    SynthSpec,
    join_cohort,
    load_cohort,
    read_clinical,
    read_features,
    synth_cohort,
    write_cohort,
    write_features,
)
from jointmtl.exceptions import CohortError, ConfigError, FormatError


def mtlf(n, d, payload=None, magic=b"MTLF", version=1):
    body = payload if payload is not None else np.arange(n * d, dtype="<f4").tobytes()
    return struct.pack("<4sIII", magic, version, n, d) + body


# ----------------------------------------------------------------- MTLF
def test_roundtrip_bitwise(tmp_path):
    x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    write_features(FeatureBag("p1", x), tmp_path / "a.mtlf")
    back = read_features(tmp_path / "a.mtlf", "p1")
    assert back.features.astype(np.float32).tobytes() == x.tobytes()
    assert back.features.dtype == np.float64 and back.patient_id == "p1"
    raw = (tmp_path / "a.mtlf").read_bytes()
    assert len(raw) == 16 + 4 * 3 * 4 and raw[:4] == b"MTLF"
    assert struct.unpack_from("<III", raw, 4) == (1, 3, 4)


def test_header_only_rejected(tmp_path):
    (tmp_path / "h.mtlf").write_bytes(mtlf(0, 4, b""))
    with pytest.raises(FormatError) as err:
        read_features(tmp_path / "h.mtlf")
    assert err.value.offset == 8


@pytest.mark.parametrize(
    "raw, offset",
    [
        (b"", 0),
        (b"MTL", 0),
        (mtlf(2, 2)[:10], 10),
        (b"XTLF" + mtlf(2, 2)[4:], 0),
        (mtlf(2, 2, version=2), 4),
        (mtlf(2, 0, b""), 12),
        (mtlf(2, 2)[:-1], 31),
        (mtlf(2, 2) + b"\0", 32),
        (mtlf(3, 2, np.zeros(4, "<f4").tobytes()), 32),
    ],
)
def test_malformed_files_diagnosed(tmp_path, raw, offset):
    (tmp_path / "bad.mtlf").write_bytes(raw)
    with pytest.raises(FormatError, match="byte offset") as err:
        read_features(tmp_path / "bad.mtlf")
    assert err.value.offset == offset


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=80), st.integers(0, 3))
def test_fuzz_never_crashes(tmp_path_factory, blob, mode):
    path = tmp_path_factory.mktemp("fz") / "f.mtlf"
    good = mtlf(2, 3)
    if mode == 0:
        raw = blob
    elif mode == 1:
        raw = good[: len(blob) % len(good)]
    elif mode == 2:
        raw = good[:4] + blob
    else:
        raw = bytearray(good)
        for i, b in enumerate(blob[:4]):
            raw[(b * 7 + i) % len(raw)] = b
        raw = bytes(raw)
    path.write_bytes(raw)
    try:
        bag = read_features(path)
    except FormatError as exc:
        assert exc.offset is not None and 0 <= exc.offset <= max(len(raw), 16)
    else:
        assert bag.n >= 1 and bag.dim >= 1 and len(raw) == 16 + 4 * bag.n * bag.dim


# ---------------------------------------------------------------- cohorts
def small_cohort(tmp_path, n=5, labelled=4):
    rng = np.random.default_rng(1)
    bags = [FeatureBag(f"P{i}", rng.normal(size=(i + 1, 3))) for i in range(n)]
    cols = {
        "MSI": np.array([i % 2 for i in range(labelled)], float),
        "TIL": np.array([0.1 * i if i != 1 else np.nan for i in range(labelled)]),
    }
    table = CohortTable([f"P{i}" for i in range(labelled)], cols)
    return bags, table, write_cohort(bags, table, tmp_path)


def test_join_logs_exclusions(tmp_path):
    bags, table, _ = small_cohort(tmp_path)
    c = join_cohort(bags, table, "MSI")
    assert len(c) == 4 and c.exclusions == {"P4": "no clinical record"}
    assert c.aux.shape == (4, 0)


def test_aux_blanks_only_affect_runs_that_need_them(tmp_path):
    bags, table, manifest = small_cohort(tmp_path)
    clinical = tmp_path / "clinical.csv"
    assert len(load_cohort(manifest, clinical, "MSI")) == 4
    with_aux = load_cohort(manifest, clinical, "MSI", ["TIL"])
    assert with_aux.patients == ["P0", "P2", "P3"]
    assert with_aux.exclusions["P1"] == "missing TIL"
    np.testing.assert_allclose(with_aux.aux[:, 0], [0.0, 0.2, 0.3])


def test_empty_join_and_unknown_column(tmp_path):
    bags, _, _ = small_cohort(tmp_path)
    other = CohortTable(["Q1"], {"MSI": np.array([1.0])})
    with pytest.raises(CohortError):
        join_cohort(bags, other, "MSI")
    with pytest.raises(ConfigError, match="HRD"):
        join_cohort(bags, other, "HRD")


def test_duplicate_patients(tmp_path):
    bags, table, _ = small_cohort(tmp_path)
    with pytest.raises(CohortError, match="P0"):
        join_cohort(bags + [bags[0]], table, "MSI")
    (tmp_path / "dup.csv").write_text("PATIENT,MSI\nP0,1\nP0,0\n")
    with pytest.raises(CohortError):
        read_clinical(tmp_path / "dup.csv")


def test_non_numeric_target_cell(tmp_path):
    bags, _, _ = small_cohort(tmp_path)
    (tmp_path / "c.csv").write_text("PATIENT,MSI,SEX\nP0,1,F\nP1,high,M\n")
    table = read_clinical(tmp_path / "c.csv")
    with pytest.raises(CohortError, match="line 3"):
        join_cohort(bags, table, "MSI")


def test_load_order_independent(tmp_path):
    bags, table, manifest = small_cohort(tmp_path)
    doc = json.loads(manifest.read_text())
    doc["slides"] = doc["slides"][::-1]
    (tmp_path / "rev.json").write_text(json.dumps(doc))
    a = load_cohort(manifest, tmp_path / "clinical.csv", "MSI", ["TIL"])
    b = load_cohort(tmp_path / "rev.json", tmp_path / "clinical.csv", "MSI", ["TIL"])
    key = lambda c: sorted((p, int(y), tuple(a)) for p, y, a in zip(c.patients, c.y, c.aux))
    assert key(a) == key(b)


def test_manifest_n_mismatch(tmp_path):
    _, _, manifest = small_cohort(tmp_path)
    doc = json.loads(manifest.read_text())
    doc["slides"][2]["n"] = 99
    manifest.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="n=99"):
        load_cohort(manifest, tmp_path / "clinical.csv", "MSI")


def test_manifest_invalid_json(tmp_path):
    (tmp_path / "m.json").write_text('{"slides": [')
    with pytest.raises(FormatError):
        load_cohort(tmp_path / "m.json", tmp_path / "none.csv", "MSI")


# -------------------------------------------------------------- synthetic
def test_synth_deterministic():
    a = synth_cohort(SynthSpec(n_patients=30, dim=8, seed=3))
    b = synth_cohort(SynthSpec(n_patients=30, dim=8, seed=3))
    assert all(x.features.tobytes() == y.features.tobytes() for x, y in zip(a[0], b[0]))
    for k in a[1].columns:
        assert a[1].columns[k].tobytes() == b[1].columns[k].tobytes()


def test_synth_shapes():
    bags, table = synth_cohort(SynthSpec(n_patients=40, dim=8, bag_min=3, bag_max=5))
    assert len(bags) == 40 and all(3 <= b.n <= 5 and b.dim == 8 for b in bags)
    assert len({b.patient_id for b in bags}) == 40


def test_synth_rho_one_is_monotone():
    _, t = synth_cohort(SynthSpec(n_patients=100, dim=4, aux_corr=1.0, flip_noise=0.0))
    f, a = t.columns["signal_fraction"], t.columns["aux"]
    order = np.argsort(f)
    assert np.all(np.diff(a[order]) > 0)
    np.testing.assert_array_equal(t.columns["label"], (f > 0.5).astype(float))


def test_synth_rho_zero_uncorrelated():
    _, t = synth_cohort(SynthSpec(n_patients=500, dim=4, bag_min=1, bag_max=2, aux_corr=0.0, seed=0))
    r = np.corrcoef(t.columns["aux"], t.columns["signal_fraction"])[0, 1]
    assert -0.1 <= r <= 0.1


@pytest.mark.parametrize("tau, noise", [(0.5, 0.1), (0.7, 0.0), (0.3, 0.25)])
def test_synth_prevalence_within_binomial_bounds(tau, noise):
    n = 2000
    _, t = synth_cohort(SynthSpec(n_patients=n, dim=2, signal_dim=1, bag_min=1, bag_max=1, threshold=tau, flip_noise=noise, seed=11))
    p = (1 - tau) * (1 - noise) + tau * noise
    assert abs(t.columns["label"].mean() - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_synth_signal_patches_shifted():
    bags, t = synth_cohort(SynthSpec(n_patients=60, dim=6, signal_shift=5.0, bag_min=40, bag_max=40))
    norms = np.array([np.linalg.norm(b.features.mean(axis=0)) for b in bags])
    assert np.corrcoef(norms, t.columns["signal_fraction"])[0, 1] > 0.9


@pytest.mark.parametrize(
    "kw", [dict(bag_min=0), dict(bag_min=5, bag_max=4), dict(aux_corr=1.5), dict(signal_dim=40), dict(flip_noise=-0.1)]
)
def test_synth_invalid(kw):
    with pytest.raises(ConfigError):
        SynthSpec(**kw).validate()


def test_write_cohort_layout(tmp_path):
    bags, table = synth_cohort(SynthSpec(n_patients=6, dim=3, signal_dim=2, bag_min=1, bag_max=2))
    manifest = write_cohort(bags, table, tmp_path)
    doc = json.loads(manifest.read_text())
    assert doc["version"] == 1 and doc["dim"] == 3 and len(doc["slides"]) == 6
    lines = (tmp_path / "clinical.csv").read_text().splitlines()
    assert lines[0] == "PATIENT,label,aux,signal_fraction" and len(lines) == 7
    c = load_cohort(manifest, tmp_path / "clinical.csv", "label", ["aux"])
    np.testing.assert_array_equal(c.aux[:, 0], table.columns["aux"])
