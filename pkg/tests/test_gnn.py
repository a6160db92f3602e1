import os

import numpy as np
import pytest

import gnnfp.autodiff as ad
import gnnfp.fp_solvers as fp
import gnnfp.gnn as gnn
import gnnfp.reform as rf
from gnnfp.channel import NetworkConfig, generate_instance, mrt_initializer

from gradcheck import max_relative_error


def small_instance(seed=11, L=2, Q=2, Nt=3, Nr=2):
    return generate_instance(NetworkConfig(L=L, Q=Q, Nt=Nt, Nr=Nr, seed=seed))


def state_after(inst, iters=1):
    v = mrt_initializer(inst)
    v, _ = fp.classical_fp(inst, v, iters)
    y = fp.update_y(inst, v)
    gamma = fp.update_gamma(inst, v)
    return v, y, gamma


def sub_for(inst, l=0, iters=1):
    _, y, gamma = state_after(inst, iters)
    return rf.build_subproblem(inst, y, gamma, l)


class TestArchitecture:
    def test_total_parameter_count(self):
        assert gnn.GNNModel(seed=0).param_count() == 7890

    def test_block_parameter_counts(self):
        blocks = gnn.GNNModel(seed=0).block_param_counts()
        assert blocks == {
            "node_encoder": 232,
            "edge_encoder": 232,
            "conv1": 1424,
            "conv2": 2960,
            "conv3": 2960,
            "decoder": 82,
        }
        assert sum(blocks.values()) == 7890

    def test_forward_shapes(self):
        inst = small_instance()
        sub = sub_for(inst)
        graph = gnn.build_graph(sub)
        assert graph.n_nodes == sub.n_var + 1
        assert graph.n_edges == graph.n_nodes * (graph.n_nodes - 1)
        model = gnn.GNNModel(seed=0)
        v, out = gnn.forward(model, graph, sub.P)
        assert v.shape == (sub.n_var,)
        assert np.iscomplexobj(v)
        assert out.data.shape == (1, sub.n_var, 2)

    def test_rejects_unknown_mode(self):
        inst = small_instance()
        sub = sub_for(inst)
        graph = gnn.build_graph(sub)
        model = gnn.GNNModel(seed=0)
        with pytest.raises(ValueError):
            gnn.forward(model, graph, sub.P, mode="predict")

    def test_batched_matches_single(self):
        inst = small_instance(L=3, Q=2, Nt=2)
        _, y, gamma = state_after(inst)
        subs = [rf.build_subproblem(inst, y, gamma, l) for l in range(3)]
        model = gnn.GNNModel(seed=0)
        daug = np.stack([s.D_aug for s in subs])
        scl = np.array([s.scale for s in subs])
        nf = gnn.node_feature_batch(daug, scl)
        ef = gnn.edge_feature_list(daug, scl)
        P = np.array([s.P for s in subs])
        out = gnn.batched_forward(model, nf, ef, P, "eval").data
        for i, s in enumerate(subs):
            v, _ = gnn.forward(model, gnn.build_graph(s), s.P)
            np.testing.assert_allclose(out[i, :, 0] + 1j * out[i, :, 1], v,
                                       rtol=0, atol=1e-12)


class TestEvalPaths:
    def test_folded_matches_taped_eval(self):
        inst = small_instance(L=2, Q=2, Nt=3, seed=7)
        _, y, gamma = state_after(inst)
        model = gnn.GNNModel(seed=3)
        # scribbled running stats so the fold actually has work to do
        rng = np.random.default_rng(0)
        for s in model.bn_states():
            s.running_mean = rng.normal(size=s.running_mean.shape)
            s.running_var = np.abs(rng.normal(size=s.running_var.shape)) + 0.2
        daug, scl = rf.build_cell_forms(inst, y, gamma)
        P = np.full(inst.config.L, inst.config.max_tx_power_W)
        nf = gnn.node_feature_batch(daug, scl)
        ef = gnn.edge_feature_list(daug, scl)
        taped = gnn.batched_forward(model, nf, ef, P, "eval").data
        fm = gnn.fold(model)
        fast = gnn.fast_forward(fm, nf, gnn.edge_feature_grid(daug, scl), P)
        np.testing.assert_allclose(fast, taped, rtol=0, atol=1e-12)

    def test_structured_matches_dense(self):
        inst = small_instance(L=3, Q=3, Nt=4, seed=9)
        _, y, gamma = state_after(inst, iters=2)
        daug, scl = rf.build_cell_forms(inst, y, gamma)
        d_all, b_all = rf.cell_quadratics(inst, y, gamma)
        model = gnn.GNNModel(seed=1)
        fm = gnn.fold(model)
        P = np.full(inst.config.L, inst.config.max_tx_power_W)
        dense = gnn.fast_forward_complex(fm, daug, scl, P)
        structured = gnn.fast_forward_structured(fm, d_all, b_all, P)
        np.testing.assert_allclose(structured, dense, rtol=0,
                                   atol=1e-14 * np.abs(dense).max())
        # the reused workspace must not leak state between calls
        again = gnn.fast_forward_structured(fm, d_all, b_all, P)
        np.testing.assert_array_equal(again, structured)

    def test_float32_tracks_float64(self):
        inst = small_instance(L=2, Q=3, Nt=4, seed=2)
        _, y, gamma = state_after(inst)
        daug, scl = rf.build_cell_forms(inst, y, gamma)
        model = gnn.GNNModel(seed=5)
        P = np.full(inst.config.L, inst.config.max_tx_power_W)
        v64 = gnn.fast_forward_complex(gnn.fold(model), daug, scl, P)
        v32 = gnn.fast_forward_complex(gnn.fold(model, dtype=np.float32),
                                       daug, scl, P)
        rel = np.abs(v32 - v64).max() / np.abs(v64).max()
        assert rel < 1e-4


class TestInvariances:
    def test_permutation_equivariance(self):
        inst = small_instance(L=2, Q=2, Nt=3, seed=13)
        sub = sub_for(inst)
        m = sub.n_var
        model = gnn.GNNModel(seed=0)
        v, _ = gnn.forward(model, gnn.build_graph(sub), sub.P)
        rng = np.random.default_rng(4)
        for _ in range(3):
            perm = rng.permutation(m)
            full = np.concatenate([perm, [m]])
            permuted = rf.QuadraticSubproblem(
                sub.cell_index, sub.D_aug[np.ix_(full, full)], sub.P,
                sub.scale, sub.Nt, sub.Q)
            vp, _ = gnn.forward(model, gnn.build_graph(permuted), sub.P)
            np.testing.assert_allclose(vp, v[perm], rtol=0, atol=1e-10)

    def test_projection_feasibility_and_identity(self):
        inst = small_instance(seed=21)
        sub = sub_for(inst)
        model = gnn.GNNModel(seed=0)
        graph = gnn.build_graph(sub)
        tight = 1e-8
        v_t, _ = gnn.forward(model, graph, tight)
        assert np.sum(np.abs(v_t) ** 2) <= tight * (1 + 1e-6)
        # an ample budget leaves the decoded beams untouched
        v_a, _ = gnn.forward(model, graph, 1e9)
        v_b, _ = gnn.forward(model, graph, 1e12)
        np.testing.assert_array_equal(v_a, v_b)
        # the tight projection only rescales
        ratio = np.sqrt(tight / np.sum(np.abs(v_a) ** 2))
        np.testing.assert_allclose(v_t, v_a * ratio, rtol=1e-6, atol=0)

    def test_scale_invariance(self):
        inst = small_instance(L=2, Q=3, Nt=3, seed=17)
        _, y, gamma = state_after(inst)
        daug, scl = rf.build_cell_forms(inst, y, gamma)
        d_all, b_all = rf.cell_quadratics(inst, y, gamma)
        model = gnn.GNNModel(seed=2)
        fm = gnn.fold(model)
        P = np.full(inst.config.L, inst.config.max_tx_power_W)
        base = gnn.fast_forward_complex(fm, daug, scl, P)
        base_s = gnn.fast_forward_structured(fm, d_all, b_all, P)
        for c in (2.0 ** -40, 2.0 ** 12):
            # power-of-two rescaling keeps the normalized features bit-exact
            np.testing.assert_array_equal(
                gnn.fast_forward_complex(fm, c * daug, c * scl, P), base)
            np.testing.assert_array_equal(
                gnn.fast_forward_structured(fm, c * d_all, c * b_all, P), base_s)
        for c in (3.7e-4, 91.3):
            np.testing.assert_allclose(
                gnn.fast_forward_structured(fm, c * d_all, c * b_all, P),
                base_s, rtol=0, atol=1e-10 * np.abs(base_s).max())


class TestStochasticLayers:
    def test_dropout_key_determinism(self):
        inst = small_instance()
        sub = sub_for(inst)
        graph = gnn.build_graph(sub)
        a = gnn.forward(gnn.GNNModel(seed=0), graph, sub.P,
                        mode="train", dkey=(1, 2, 3))[0]
        b = gnn.forward(gnn.GNNModel(seed=0), graph, sub.P,
                        mode="train", dkey=(1, 2, 3))[0]
        c = gnn.forward(gnn.GNNModel(seed=0), graph, sub.P,
                        mode="train", dkey=(1, 2, 4))[0]
        np.testing.assert_array_equal(a, b)
        assert np.abs(a - c).max() > 0

    def test_eval_ignores_dropout_key(self):
        inst = small_instance()
        sub = sub_for(inst)
        graph = gnn.build_graph(sub)
        model = gnn.GNNModel(seed=0)
        a, _ = gnn.forward(model, graph, sub.P, mode="eval", dkey=(9, 9, 9))
        b, _ = gnn.forward(model, graph, sub.P, mode="eval")
        np.testing.assert_array_equal(a, b)

    def test_train_mode_updates_running_stats(self):
        inst = small_instance()
        sub = sub_for(inst)
        graph = gnn.build_graph(sub)
        model = gnn.GNNModel(seed=0)
        before = [s.running_mean.copy() for s in model.bn_states()]
        eval_before, _ = gnn.forward(model, graph, sub.P)
        gnn.forward(model, graph, sub.P, mode="train", dkey=(0, 0, 0))
        changed = [np.abs(s.running_mean - b).max()
                   for s, b in zip(model.bn_states(), before)]
        assert all(c > 0 for c in changed)
        eval_after, _ = gnn.forward(model, graph, sub.P)
        assert np.abs(eval_after - eval_before).max() > 0


class TestGradients:
    def test_loss_gradient_identity(self):
        # through the real embedding the per-record gradient is 2 (A x - r)
        rng = np.random.default_rng(8)
        B, m = 3, 4
        z = rng.normal(size=(B, m, m)) + 1j * rng.normal(size=(B, m, m))
        d_blk = z @ z.conj().swapaxes(1, 2)
        b_sta = rng.normal(size=(B, m)) + 1j * rng.normal(size=(B, m))
        x0 = rng.normal(size=(B, m, 2))
        with ad.Tape():
            vt = ad.parameter(x0.copy())
            loss = gnn.quadratic_loss(d_blk, b_sta, vt)
        ad.backward(loss)
        A = gnn.real_embed_batch(d_blk)
        r = np.concatenate([b_sta.real, b_sta.imag], axis=1)
        x = np.concatenate([x0[..., 0], x0[..., 1]], axis=1)
        gx = 2.0 * (np.einsum("bij,bj->bi", A, x) - r) / B
        expect = np.stack([gx[:, :m], gx[:, m:]], axis=-1)
        np.testing.assert_allclose(vt.grad, expect, rtol=1e-12, atol=1e-12)

    def test_model_gradients_match_finite_differences(self):
        # sampled central differences across every parameter tensor, eval mode
        inst = small_instance(L=2, Q=2, Nt=2, seed=3)
        _, y, gamma = state_after(inst)
        subs = [rf.build_subproblem(inst, y, gamma, l) for l in range(2)]
        daug = np.stack([s.D_aug for s in subs])
        scl = np.array([s.scale for s in subs])
        nf = gnn.node_feature_batch(daug, scl)
        ef = gnn.edge_feature_list(daug, scl)
        P = np.array([s.P for s in subs])
        model = gnn.GNNModel(seed=6)
        # jitter away from the zero-init point: the all-zero constant-node and
        # empty-edge features otherwise sit exactly on relu kinks, where
        # central differences straddle the fold instead of measuring a slope
        jit = np.random.default_rng(12)
        for p in model.parameters():
            p.data = p.data + jit.uniform(-0.05, 0.05, size=p.data.shape)
        for s in model.bn_states():
            s.running_mean = jit.uniform(-0.2, 0.2, size=s.running_mean.shape)
            s.running_var = 1.0 + jit.uniform(-0.2, 0.2, size=s.running_var.shape)

        def run():
            with ad.Tape():
                out = gnn.batched_forward(model, nf, ef, P, "eval")
                loss = gnn.loss_for(subs, out)
            return loss, float(loss.data)

        loss, _ = run()
        ad.backward(loss)
        analytic = [p.grad.copy() for p in model.parameters()]

        rng = np.random.default_rng(0)
        step = 1e-6
        worst = 0.0
        for p, g in zip(model.parameters(), analytic):
            flat = p.data.ravel()
            gf = g.ravel()
            idx = rng.choice(flat.size, size=min(6, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp_val = run()[1]
                flat[i] = orig - step
                fm_val = run()[1]
                flat[i] = orig
                num = (fp_val - fm_val) / (2 * step)
                worst = max(worst, max_relative_error([gf[i:i + 1]],
                                                      [np.array([num])]))
        assert worst < 1e-5


class TestCheckpoints:
    def scribbled_model(self):
        model = gnn.GNNModel(seed=4)
        rng = np.random.default_rng(1)
        for s in model.bn_states():
            s.running_mean = rng.normal(size=s.running_mean.shape)
            s.running_var = np.abs(rng.normal(size=s.running_var.shape)) + 0.1
        return model

    def test_round_trip_bytes(self, tmp_path):
        model = self.scribbled_model()
        p1 = str(tmp_path / "a.gnfp")
        p2 = str(tmp_path / "b.gnfp")
        gnn.save_model(model, p1)
        loaded = gnn.load_model(p1)
        gnn.save_model(loaded, p2)
        with open(p1, "rb") as f:
            one = f.read()
        with open(p2, "rb") as f:
            two = f.read()
        assert one == two

    def test_round_trip_forward(self, tmp_path):
        inst = small_instance()
        sub = sub_for(inst)
        graph = gnn.build_graph(sub)
        model = self.scribbled_model()
        path = str(tmp_path / "m.gnfp")
        gnn.save_model(model, path)
        loaded = gnn.load_model(path)
        a, _ = gnn.forward(model, graph, sub.P)
        b, _ = gnn.forward(loaded, graph, sub.P)
        np.testing.assert_array_equal(a, b)

    def test_float32_model_saves_float64_bytes(self, tmp_path):
        model = self.scribbled_model()
        p1 = str(tmp_path / "a.gnfp")
        p2 = str(tmp_path / "b.gnfp")
        gnn.save_model(model, p1)
        model.cast(np.float32).cast(np.float64)
        gnn.save_model(model, p2)
        with open(p1, "rb") as f:
            one = f.read()
        with open(p2, "rb") as f:
            two = f.read()
        # same widths, but the f32 round trip quantized the values
        assert len(one) == len(two)
        loaded = gnn.load_model(p2)
        assert loaded.dtype == np.float64

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "m.gnfp")
        gnn.save_model(gnn.GNNModel(seed=0), path)
        with open(path, "r+b") as f:
            f.write(b"NOTAMODEL")
        with pytest.raises(gnn.CorruptFile):
            gnn.load_model(path)

    def test_version_mismatch(self, tmp_path):
        path = str(tmp_path / "m.gnfp")
        gnn.save_model(gnn.GNNModel(seed=0), path)
        with open(path, "r+b") as f:
            f.seek(12)
            f.write((99).to_bytes(4, "little"))
        with pytest.raises(gnn.VersionMismatch):
            gnn.load_model(path)

    def test_truncated(self, tmp_path):
        path = str(tmp_path / "m.gnfp")
        gnn.save_model(gnn.GNNModel(seed=0), path)
        size = os.path.getsize(path)
        with open(path, "r+b") as f:
            f.truncate(size - 128)
        with pytest.raises(gnn.CorruptFile):
            gnn.load_model(path)

    def test_truncated_header(self, tmp_path):
        path = str(tmp_path / "m.gnfp")
        with open(path, "wb") as f:
            f.write(b"GNFPMODEL")
        with pytest.raises(gnn.CorruptFile):
            gnn.load_model(path)
