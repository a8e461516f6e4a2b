import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insitu_wfs.basis import make_basis
from insitu_wfs.interferometry import (
    PHASE_SHIFTS,
    ComplexField,
    InterferogramSet,
    check_sign_convention,
    combine_three_step,
    correction_slm,
    element_amplitude_direct,
    element_amplitudes,
    measure,
    reconstruct_full,
)
from insitu_wfs.optics import (
    DetectorModel,
    GlassSlide,
    RandomScreen,
    amplitude_at_detector,
    ground_truth_field,
    make_bench,
)

IDEAL = DetectorModel().ideal()


@pytest.fixture(scope="module")
def glass():
    return make_bench(512, GlassSlide(), IDEAL)


@pytest.fixture(scope="module")
def glass_unquantized():
    return make_bench(512, GlassSlide(), IDEAL, slm_levels=0)


def test_phase_shifts():
    assert PHASE_SHIFTS == (0.0, 2 * np.pi / 3, 4 * np.pi / 3)


def test_combine_per_cell_closed_form():
    # I_r = I_x = 1, zero phase difference: I_m = 2 + 2 cos(delta_m)
    assert combine_three_step([4.0], [1.0], [1.0])[0] == pytest.approx(2.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(-np.pi, np.pi))
def test_combine_general_phase(ir, ix, dphi):
    i_m = [ir + ix + 2 * np.sqrt(ir * ix) * np.cos(dphi + d) for d in PHASE_SHIFTS]
    out = combine_three_step(*[[v] for v in i_m])[0]
    assert out == pytest.approx(2 * np.sqrt(ir * ix) * np.exp(-1j * dphi), rel=1e-9, abs=1e-9)


def test_dc_immunity_exact():
    rng = np.random.default_rng(0)
    x = [rng.integers(0, 1000, 64).astype(float) for _ in range(3)]
    base = combine_three_step(*x)
    for c in (1.0, 17.0, 1024.0):
        assert np.array_equal(combine_three_step(*(v + c for v in x)), base)
    const = np.full(8, 5.0)
    assert np.array_equal(combine_three_step(const, const, const), np.zeros(8, complex))


def test_combine_length_mismatch():
    with pytest.raises(ValueError):
        combine_three_step(np.ones(3), np.ones(3), np.ones(4))


def test_fast_amplitudes_match_render(glass):
    for kind, order in (("hadamard", "cake"), ("canonical", None)):
        basis = make_basis(64, kind, order)
        fast = element_amplitudes(glass, basis)
        for k in (0, 5, 37, 63):
            for m in range(3):
                direct = element_amplitude_direct(glass, basis, k, m)
                assert abs(fast[k, m] - direct) <= 1e-10 * np.abs(fast).max()


def test_no_reference_no_fringes(glass):
    bench = glass.with_(reference_amp=0j, slm_levels=0)
    ig = measure(bench, make_basis(16, "hadamard"))
    assert np.allclose(ig.values[:, 0], ig.values[:, 1], rtol=1e-12)
    assert np.allclose(ig.values[:, 0], ig.values[:, 2], rtol=1e-12)


def test_hadamard_columns_follow_linear_model(glass_unquantized):
    """I_m - H x_m is the same for every shift (the |r|^2 + |y|^2 term)."""
    bench = glass_unquantized
    n = 64
    basis = make_basis(n, "hadamard")
    ig = measure(bench, basis)
    u = ground_truth_field(bench, n) * np.sqrt(bench.modulated_fraction)
    r = bench.reference_amp
    residual = []
    for m, d in enumerate(PHASE_SHIFTS):
        x_m = 2 * np.real(np.conj(r) * np.exp(1j * d) * u)
        residual.append(ig.values[:, m] - basis.apply(x_m))
    scale = np.abs(ig.values).max()
    assert np.allclose(residual[0], residual[1], atol=1e-10 * scale)
    assert np.allclose(residual[0], residual[2], atol=1e-10 * scale)


@pytest.mark.parametrize("kind", ["hadamard", "canonical"])
def test_noiseless_glass_reconstruction(glass, kind):
    basis = make_basis(64, kind)
    fld = reconstruct_full(basis, measure(glass, basis))
    assert fld.correlation(ground_truth_field(glass, 64)) >= 0.999


def test_bases_agree(glass):
    a = reconstruct_full(make_basis(64, "canonical"), measure(glass, make_basis(64, "canonical")))
    h = make_basis(64, "hadamard", "walsh")
    b = reconstruct_full(h, measure(glass, h))
    assert a.correlation(b) >= 0.999


def test_zero_interferograms_give_zero_field():
    basis = make_basis(16, "hadamard")
    ig = InterferogramSet(np.zeros((16, 3)), "hadamard", "natural", basis.perm, 1.0)
    assert not np.any(reconstruct_full(basis, ig).values)


@pytest.mark.parametrize("detector", [IDEAL, DetectorModel()])
def test_reorder_equals_measuring_in_order(detector):
    bench = make_bench(512, RandomScreen(seed=1), detector)
    nat = make_basis(64, "hadamard")
    cake = make_basis(64, "hadamard", "cake")
    direct = measure(bench, cake, 1.0, seed=5)
    reordered = measure(bench, nat, 1.0, seed=5).reorder(cake)
    assert np.array_equal(direct.values, reordered.values)
    assert np.array_equal(direct.natural_index, reordered.natural_index)


def test_reorder_rejects_cross_basis(glass):
    ig = measure(glass, make_basis(16, "hadamard"))
    with pytest.raises(ValueError):
        ig.reorder(make_basis(16, "canonical"))
    with pytest.raises(ValueError):
        ig.reorder(make_basis(64, "hadamard"))


def test_noise_robustness_ordering():
    """Equal exposure and noise: Hadamard beats canonical at large n."""
    bench = make_bench(512, GlassSlide(), DetectorModel())
    gt = ground_truth_field(bench, 1024)
    corr = {}
    for kind in ("hadamard", "canonical"):
        basis = make_basis(1024, kind)
        corr[kind] = reconstruct_full(basis, measure(bench, basis, 1.0, seed=3)).correlation(gt)
    assert corr["hadamard"] >= corr["canonical"]


def test_correction_raises_focus(glass):
    basis = make_basis(64, "hadamard")
    fld = reconstruct_full(basis, measure(glass, basis))
    before = abs(amplitude_at_detector(glass, glass.prism_pattern()))
    after = abs(amplitude_at_detector(glass, correction_slm(glass, fld).phase))
    assert after > 10 * before


def test_sign_convention_self_check():
    assert check_sign_convention() is True


def test_measure_metadata_and_saturation():
    bench = make_bench(512, GlassSlide(), DetectorModel())
    ig = measure(bench, make_basis(16, "hadamard"), exposure_ms=1000.0, seed=2)
    assert ig.meta["saturation_fraction"] > 0.5
    assert ig.values.max() <= bench.detector.full_scale
    assert ig.meta["seed"] == 2


def test_csv_roundtrip(tmp_path, glass):
    basis = make_basis(16, "hadamard", "random:8")
    ig = measure(glass.with_(detector=DetectorModel()), basis, 1.0, seed=4)
    path, side = ig.to_csv(tmp_path / "ig.csv")
    assert path.read_text().splitlines()[0] == "element,shift_index,intensity"
    back = InterferogramSet.from_csv(path)
    assert np.array_equal(back.values, ig.values)
    assert np.array_equal(back.natural_index, ig.natural_index)
    assert back.ordering == "random:8" and back.exposure_ms == 1.0
    assert back.basis().label == basis.label


def test_csv_missing_rows(tmp_path, glass):
    ig = measure(glass, make_basis(16, "hadamard"))
    path, _ = ig.to_csv(tmp_path / "ig.csv")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValueError):
        InterferogramSet.from_csv(path)


def test_interferogram_validation():
    with pytest.raises(ValueError):
        InterferogramSet(np.zeros((4, 2)), "hadamard", "natural", np.arange(4), 1.0)
    with pytest.raises(ValueError):
        InterferogramSet(np.full((4, 3), np.nan), "hadamard", "natural", np.arange(4), 1.0)


def test_complex_field_gauge():
    rng = np.random.default_rng(2)
    v = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    f = ComplexField(v)
    assert f.correlation(3.5 * np.exp(0.7j) * v) == pytest.approx(1.0)
    assert f.grid().shape == (4, 4)
    ph = f.correction_phase()
    assert np.allclose(np.angle(np.exp(1j * ph) * f.grid()), 0, atol=1e-12)
