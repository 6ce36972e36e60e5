import numpy as np
import pytest

from hetscale import tensor as T
from hetscale.hessian import (SplittingSpectrum, export_spectrum, layer_spectrum, model_spectra,
                              negative_magnitude_median, read_spectrum_csv, splitting_matrices,
                              splitting_matrix, spectrum_svg, uses_fallback, write_spectrum_csv)
from hetscale.model import MLPClassifier, build_model

from oracles import fd_hessian, split_slice, splitting_oracle


def _toy(seed=0, n=48, d=6, hidden=5, classes=3):
    rng = np.random.default_rng(seed)
    model = MLPClassifier(d, hidden, classes, seed=seed)
    x = rng.normal(size=(n, d))
    y = rng.integers(0, classes, size=n)
    return model, x, y


class TestSplittingMatrix:
    def test_equals_hessian_minus_gauss_newton(self):
        model, x, y = _toy()
        mats = splitting_matrices(model, "fc1", [(x, y)], mode="strict")
        for i in range(model.fc1.out_dim):
            ref = splitting_oracle(model, x, y, i)
            rel = np.linalg.norm(mats[i] - ref) / np.linalg.norm(ref)
            assert rel < 1e-3, (i, rel)

    def test_second_derivative_of_split_slice(self):
        """Splitting along v changes the loss by eps^2/2 * v^T S v."""
        model, x, y = _toy(seed=3)
        mats = splitting_matrices(model, "fc1", [(x, y)], mode="strict")
        i = int(np.argmin(np.linalg.eigvalsh(mats)[:, 0]))
        lam, vecs = np.linalg.eigh(mats[i])
        v = vecs[:, 0]
        h = 1e-3
        curv = (split_slice(model, x, y, i, v, h) - 2 * split_slice(model, x, y, i, v, 0.0)
                + split_slice(model, x, y, i, v, -h)) / h ** 2
        assert curv == pytest.approx(lam[0], rel=1e-3, abs=1e-7)
        if lam[0] < 0:
            assert split_slice(model, x, y, i, v, 0.05) < split_slice(model, x, y, i, v, 0.0)

    def test_batches_are_sample_weighted(self):
        model, x, y = _toy()
        whole = splitting_matrices(model, "fc1", [(x, y)], mode="strict")
        parts = splitting_matrices(model, "fc1", [(x[:16], y[:16]), (x[16:], y[16:])],
                                   mode="strict")
        np.testing.assert_allclose(parts, whole, atol=1e-12)

    def test_loss_scale_is_linear(self):
        model, x, y = _toy()
        a = splitting_matrices(model, "fc1", [(x, y)], mode="strict")
        b = splitting_matrices(model, "fc1", [(x, y)], mode="strict", loss_scale=3.0)
        np.testing.assert_allclose(b, 3.0 * a, rtol=1e-10)

    def test_strict_linear_neurons_are_zero(self):
        model, x, y = _toy()
        assert not np.any(splitting_matrices(model, "fc2", [(x, y)], mode="strict"))

    def test_single_neuron_and_errors(self):
        model, x, y = _toy()
        full = splitting_matrices(model, "fc1", [(x, y)], mode="strict")
        np.testing.assert_allclose(splitting_matrix(model, "fc1", 2, [(x, y)], mode="strict"),
                                   full[2])
        with pytest.raises(ValueError):
            splitting_matrices(model, "fc1", [(x, y)], neurons=[99])
        with pytest.raises(ValueError):
            splitting_matrices(model, "fc1", [(x, y)], max_batches=2)
        with pytest.raises(ValueError):
            uses_fallback(model.fc1, "bogus")


class TestBlockHessianFallback:
    def test_linear_output_neuron_matches_softmax_curvature(self):
        """For a logit neuron c: d2L/dw_c2 = mean p_c (1 - p_c) h h^T."""
        model, x, y = _toy(seed=1)
        mats = splitting_matrices(model, "fc2", [(x, y)], mode="auto")
        w1, b1 = model.fc1.weight.data.astype(np.float64), model.fc1.bias.data.astype(np.float64)
        h = T.gelu_np(x @ w1.T + b1)
        with T.no_grad():
            logits = model.astype(np.float64)(x).data
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        for c in range(3):
            ref = np.einsum("n,na,nb->ab", p[:, c] * (1 - p[:, c]), h, h) / len(y)
            np.testing.assert_allclose(mats[c], ref, atol=1e-6)

    @pytest.mark.parametrize("layer_id", ["blocks.0.attn.qkv", "blocks.1.attn.proj",
                                          "blocks.0.mlp.fc2", "blocks.1.mlp.fc1"])
    def test_transformer_layers_match_value_differences(self, tiny_cfg, layer_id):
        rng = np.random.default_rng(7)
        model = build_model(tiny_cfg, seed=7).astype(np.float64)
        for p in model.parameters():
            p.data = p.data + rng.normal(scale=0.3, size=p.shape)
        x = rng.normal(size=(3, 1, 4, 4))
        y = np.array([0, 1, 2])
        neuron = 1
        mats = splitting_matrices(model, layer_id, [(x, y)], mode="hessian", neurons=[neuron])
        lay = model.layer(layer_id)
        base = lay.weight.data.copy()

        def loss(row):
            lay.weight.data = base.copy()
            lay.weight.data[neuron] = row
            with T.no_grad():
                return float(T.cross_entropy(model(x), y).data)

        ref = fd_hessian(loss, base[neuron].copy(), eps=1e-3)
        lay.weight.data = base
        np.testing.assert_allclose(mats[0], ref, atol=2e-5 * max(1.0, np.abs(ref).max()))


class TestSpectrum:
    def test_layer_spectrum_and_solvers(self):
        model, x, y = _toy()
        batches = [(x[:24], y[:24]), (x[24:], y[24:])]
        lap = layer_spectrum(model, "fc1", batches, epoch=3, max_batches=2)
        jac = layer_spectrum(model, "fc1", batches, epoch=3, max_batches=2, solver="jacobi")
        mats = splitting_matrices(model, "fc1", batches)
        np.testing.assert_allclose(lap.min_eigvals, np.linalg.eigvalsh(mats)[:, 0], rtol=1e-6)
        np.testing.assert_allclose(jac.min_eigvals, lap.min_eigvals, rtol=1e-6, atol=1e-9)
        assert lap.epoch == 3 and lap.in_dim == 6 and lap.batch_count == 2
        assert lap.source == "splitting"
        fb = layer_spectrum(model, "fc2", batches, max_batches=2)
        assert fb.source == "block_hessian"

    def test_model_spectra_covers_growable_layers(self, tiny_cfg, rng):
        model = build_model(tiny_cfg, seed=0)
        batch = (rng.normal(size=(4, 1, 4, 4)).astype(np.float32), np.array([0, 1, 2, 0]))
        specs = model_spectra(model, [batch], max_batches=1, fallback_samples=2)
        assert [s.layer_id for s in specs] == [lay.name for lay in model.growable_layers()]
        assert all(s.out_dim == model.layer(s.layer_id).out_dim for s in specs)

    def test_scaled_and_eligible(self):
        s = SplittingSpectrum("l", 0, np.array([-2.0, 1e-7, -1e-7, -0.5]), 2.5, 1, 4)
        np.testing.assert_array_equal(s.eligible(), [0, 3])
        np.testing.assert_array_equal(s.scaled(2.0).eligible(), [0, 3])

    def test_median(self):
        s1 = SplittingSpectrum("a", 0, np.array([-1.0, 2.0]), 1.0, 1, 2)
        s2 = SplittingSpectrum("b", 0, np.array([-3.0, -2.0]), 5.0, 1, 2)
        assert negative_magnitude_median([s1, s2]) == 2.0
        assert negative_magnitude_median([SplittingSpectrum("c", 0, np.ones(2), 0.0, 1, 2)]) == 0.0


class TestExport:
    def test_csv_round_trip_is_exact(self, tmp_path, rng):
        vals = rng.normal(size=17).astype(np.float32)
        spec = SplittingSpectrum("blocks.0.mlp.fc1", 40, vals, 0.0, 4, 64, "FC1")
        path = tmp_path / "s.csv"
        write_spectrum_csv(spec, path)
        (back,) = read_spectrum_csv(path)
        np.testing.assert_array_equal(back.min_eigvals, vals)
        assert (back.layer_id, back.epoch, back.in_dim) == ("blocks.0.mlp.fc1", 40, 64)

    def test_csv_rejects_gaps(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("epoch,layer_id,neuron_index,min_eigval,source,in_dim\n"
                        "0,l,0,-1,splitting,4\n0,l,2,-1,splitting,4\n")
        with pytest.raises(ValueError):
            read_spectrum_csv(path)

    def test_export_layout_and_svg(self, tmp_path):
        spec = SplittingSpectrum("blocks.1.attn.qkv", 20, np.array([-0.5, 0.2, -0.1]), 0.6, 4, 32,
                                 "QKV", "block_hessian")
        files = export_spectrum([spec], tmp_path)
        assert {f.name for f in files} == {"blocks.1.attn.qkv.csv", "blocks.1.attn.qkv.svg"}
        assert all(f.parent == tmp_path / "spectra" / "20" for f in files)
        svg = spectrum_svg(spec)
        assert svg.startswith("<svg") and svg.count('class="point"') == 2
        with pytest.raises(ValueError):
            export_spectrum([], tmp_path)
