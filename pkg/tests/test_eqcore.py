from __future__ import annotations

import dataclasses

import numpy as np
import pytest
from numpy.testing import assert_allclose
from pytest import approx

from xtalkit.autodiff import concat, tensor
from xtalkit.eqcore import (
    LossWeights,
    ModelConfig,
    TrainConfig,
    forward,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from xtalkit.eqcore.loss import EnergyStandardizer, Targets, multitask_loss, perturb
from xtalkit.eqcore.model import PredictionBundle, build_cache, embed, heads, make_denoiser
from xtalkit.eqcore.train import (
    gradients,
    lr_at,
    make_supervised_loss,
    prepare_samples,
    train,
    write_loss_csv,
)
from xtalkit.structio import AtomicSystem

from conftest import random_molecule, random_rotation

TINY = ModelConfig(l_max=1, channels=4, blocks=1, heads=2, grid_resolution=2,
                   n_radial=8, max_z=30)


def tiny_molecule():
    pos = np.array([[0.0, 0.0, 0.0], [1.1, 0.2, -0.3], [-0.4, 1.3, 0.8]])
    return AtomicSystem([6, 1, 8], pos)


def tiny_crystal():
    lattice = np.diag([4.0, 5.0, 6.0])
    pos = np.array([[0.2, 0.3, 0.1], [2.1, 2.6, 3.2]])
    return AtomicSystem([3, 9], pos, lattice)


class TestModelConfig:
    def test_defaults_and_json_roundtrip(self):
        cfg = ModelConfig()
        back = ModelConfig.from_json(cfg.to_json())
        assert back == cfg
        assert back.digest() == cfg.digest()

    def test_digest_tracks_fields(self):
        assert ModelConfig().digest() != ModelConfig(channels=32).digest()

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(l_max=0)
        with pytest.raises(ValueError):
            ModelConfig(channels=15, heads=2)
        with pytest.raises(ValueError):
            ModelConfig(blocks=-1)
        with pytest.raises(ValueError):
            ModelConfig(grid_resolution=0)

    def test_long_range_block_selection(self):
        assert ModelConfig(blocks=3).lrc_set() == {2, 3}
        assert ModelConfig(blocks=1).lrc_set() == {1}
        assert ModelConfig(blocks=0).lrc_set() == frozenset()
        assert ModelConfig(blocks=3, lrc_layers=(2,)).lrc_set() == {2}


class TestParams:
    def test_init_is_deterministic(self):
        a = init_params(TINY, seed=7)
        b = init_params(TINY, seed=7)
        c = init_params(TINY, seed=8)
        assert_allclose(a.flat(), b.flat())
        assert float(np.abs(a.flat() - c.flat()).max()) > 0.0

    def test_norm_gains_start_at_one_biases_at_zero(self):
        params = init_params(TINY, seed=0)
        assert_allclose(params["final_ln.g"].data, 1.0)
        assert_allclose(params["atom_embed.b"].data, 0.0)

    def test_flat_roundtrip(self):
        params = init_params(TINY, seed=1)
        flat = params.flat()
        assert flat.shape == (params.n_params,)
        params.set_flat(flat * 2.0)
        assert_allclose(params.flat(), flat * 2.0)
        with pytest.raises(ValueError):
            params.set_flat(flat[:-1])

    def test_checkpoint_roundtrip(self, tmp_path):
        params = init_params(TINY, seed=3)
        path = tmp_path / "model.npz"
        save_checkpoint(path, params, TINY)
        loaded_params, loaded_cfg = load_checkpoint(path)
        assert loaded_cfg == TINY
        assert_allclose(loaded_params.flat(), params.flat())

    def test_checkpoint_rejects_tampered_config(self, tmp_path):
        path = tmp_path / "model.npz"
        save_checkpoint(path, init_params(TINY, seed=3), TINY)
        with np.load(path, allow_pickle=False) as blob:
            entries = {k: blob[k] for k in blob.files}
        entries["__config__"] = np.array(ModelConfig(l_max=2, channels=4, heads=2,
                                                     grid_resolution=2, n_radial=8,
                                                     max_z=30).to_json())
        np.savez(path, **entries)
        with pytest.raises(ValueError, match="digest"):
            load_checkpoint(path)

    def test_checkpoint_rejects_missing_tensor(self, tmp_path):
        path = tmp_path / "model.npz"
        save_checkpoint(path, init_params(TINY, seed=3), TINY)
        with np.load(path, allow_pickle=False) as blob:
            entries = {k: blob[k] for k in blob.files}
        entries.pop("t__atom_embed.W")
        np.savez(path, **entries)
        with pytest.raises(ValueError, match="missing tensor"):
            load_checkpoint(path)


class TestEmbedAndForward:
    def test_zero_blocks_returns_embedding(self):
        cfg = dataclasses.replace(TINY, blocks=0)
        params = init_params(cfg, seed=0)
        sys_ = tiny_crystal()
        cache = build_cache(sys_.numbers, sys_.positions, sys_.lattice, cfg)
        out = forward(cache, params, cfg)
        emb = embed(cache, params, cfg)
        for l in out:
            assert_allclose(out[l].data, emb[l].data)

    def test_edge_doubling_with_doubled_denominator_is_identity(self):
        # duplicating the aggregated edge list while doubling the degree
        # normalizer must leave the embedding untouched
        cfg = TINY
        params = init_params(cfg, seed=2)
        sys_ = tiny_crystal()
        cache = build_cache(sys_.numbers, sys_.positions, sys_.lattice, cfg)
        doubled = dataclasses.replace(
            cache,
            src=np.concatenate([cache.src, cache.src]),
            dst=np.concatenate([cache.dst, cache.dst]),
            disp=np.concatenate([cache.disp, cache.disp]),
            rbf=np.concatenate([cache.rbf, cache.rbf]),
            d_in={l: np.concatenate([m, m]) for l, m in cache.d_in.items()},
            d_out={l: np.concatenate([m, m]) for l, m in cache.d_out.items()},
            edge_col={l: np.concatenate([m, m]) for l, m in cache.edge_col.items()},
            denom=cache.denom * 2.0,
        )
        base = embed(cache, params, cfg)
        again = embed(doubled, params, cfg)
        for l in base:
            assert_allclose(again[l].data, base[l].data, atol=1e-12)

    def test_timestep_conditioning_enters_invariant_channel_only(self):
        params = init_params(TINY, seed=4)
        sys_ = tiny_crystal()
        cache = build_cache(sys_.numbers, sys_.positions, sys_.lattice, TINY)
        plain = embed(cache, params, TINY)
        timed = embed(cache, params, TINY, timestep=0.5)
        assert float(np.abs(plain[0].data - timed[0].data).max()) > 0.0
        assert_allclose(plain[1].data, timed[1].data)

    def test_non_finite_features_raise(self):
        params = init_params(TINY, seed=0)
        params["atom_embed.W"].data[:] = np.nan
        sys_ = tiny_crystal()
        cache = build_cache(sys_.numbers, sys_.positions, sys_.lattice, TINY)
        with pytest.raises(RuntimeError, match="non-finite"):
            forward(cache, params, TINY)


class TestSymmetries:
    CFG = ModelConfig(l_max=2, channels=8, blocks=1, heads=2, grid_resolution=18,
                      n_radial=8, max_z=30, r_c=6.0)

    def test_rigid_translation_is_exact(self):
        params = init_params(self.CFG, seed=5)
        sys_ = tiny_molecule()
        moved = AtomicSystem(sys_.numbers, sys_.positions + np.array([3.0, -7.0, 2.0]))
        a = predict(sys_, params, self.CFG)
        b = predict(moved, params, self.CFG)
        assert b.energy.item() == approx(a.energy.item(), abs=1e-12)
        assert_allclose(b.forces.data, a.forces.data, atol=1e-12)

    def test_permuting_atoms_permutes_outputs(self):
        params = init_params(self.CFG, seed=5)
        sys_ = tiny_molecule()
        perm = np.array([2, 0, 1])
        permuted = AtomicSystem(sys_.numbers[perm], sys_.positions[perm])
        a = predict(sys_, params, self.CFG)
        b = predict(permuted, params, self.CFG)
        assert b.energy.item() == approx(a.energy.item(), abs=1e-10)
        assert_allclose(b.forces.data, a.forces.data[perm], atol=1e-10)
        assert_allclose(b.atom_energies.data, a.atom_energies.data[perm], atol=1e-10)

    def test_rotation_equivariance_within_grid_accuracy(self, rng):
        params = init_params(self.CFG, seed=5)
        sys_ = tiny_molecule()
        base = predict(sys_, params, self.CFG)
        for _ in range(3):
            rot = random_rotation(rng)
            rotated = AtomicSystem(sys_.numbers, sys_.positions @ rot.T)
            out = predict(rotated, params, self.CFG)
            assert out.energy.item() == approx(base.energy.item(), abs=1e-6)
            assert_allclose(out.forces.data, base.forces.data @ rot.T, atol=1e-6)

    def test_grid_aligned_azimuthal_rotation_is_exact(self):
        # rotating about z by the grid's own azimuthal period commutes with
        # the sampled nonlinearity to machine precision
        cfg = dataclasses.replace(self.CFG, grid_resolution=2)
        params = init_params(cfg, seed=5)
        angle = 2.0 * np.pi / cfg.grid_resolution
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        sys_ = tiny_molecule()
        base = predict(sys_, params, cfg)
        out = predict(AtomicSystem(sys_.numbers, sys_.positions @ rot.T), params, cfg)
        assert out.energy.item() == approx(base.energy.item(), abs=1e-9)
        assert_allclose(out.forces.data, base.forces.data @ rot.T, atol=1e-9)


class TestHeads:
    def test_unknown_mode_rejected(self):
        params = init_params(TINY, seed=0)
        with pytest.raises(ValueError, match="unknown head modes"):
            predict(tiny_crystal(), params, TINY, modes=("energy", "bogus"))

    def test_cell_noise_needs_lattice(self):
        params = init_params(TINY, seed=0)
        with pytest.raises(ValueError, match="lattice"):
            predict(tiny_molecule(), params, TINY, modes=("cell_noise",))

    def test_atom_energies_sum_to_energy(self):
        params = init_params(TINY, seed=1)
        out = predict(tiny_crystal(), params, TINY, modes=("energy",))
        assert out.energy.item() == approx(float(out.atom_energies.data.sum()))

    def test_duplicating_features_doubles_sum_and_keeps_mean(self):
        params = init_params(TINY, seed=1)
        sys_ = tiny_crystal()
        cache = build_cache(sys_.numbers, sys_.positions, sys_.lattice, TINY)
        feats = forward(cache, params, TINY)
        doubled_feats = {l: concat([f, f], axis=0) for l, f in feats.items()}
        doubled_cache = dataclasses.replace(cache, n_atoms=2 * cache.n_atoms)
        a = heads(feats, cache, params, TINY, modes=("energy", "property"))
        b = heads(doubled_feats, doubled_cache, params, TINY, modes=("energy", "property"))
        assert b.energy.item() == approx(2.0 * a.energy.item())
        assert_allclose(b.property_vector.data, a.property_vector.data, atol=1e-12)

    def test_cell_noise_is_linear_in_lattice(self):
        params = init_params(TINY, seed=2)
        sys_ = tiny_crystal()
        cache = build_cache(sys_.numbers, sys_.positions, sys_.lattice, TINY)
        feats = forward(cache, params, TINY)
        one = heads(feats, cache, params, TINY, modes=("cell_noise",), lattice=sys_.lattice)
        two = heads(feats, cache, params, TINY, modes=("cell_noise",),
                    lattice=2.0 * sys_.lattice)
        assert_allclose(two.cell_noise.data, 2.0 * one.cell_noise.data, atol=1e-12)

    def test_denoiser_adapter_returns_arrays(self):
        params = init_params(TINY, seed=3)
        denoise = make_denoiser(params, TINY)
        sys_ = tiny_crystal()
        dx, dl = denoise(sys_.numbers, sys_.positions, sys_.lattice, 0.5)
        assert isinstance(dx, np.ndarray) and dx.shape == (2, 3)
        assert isinstance(dl, np.ndarray) and dl.shape == (3, 3)


class TestLoss:
    def test_force_only_worked_example(self):
        bundle = PredictionBundle()
        bundle.forces = tensor(np.zeros((2, 3)))
        loss, breakdown = multitask_loss(bundle, Targets(forces=np.full((2, 3), 0.5)))
        assert loss.item() == approx(10.0)
        assert breakdown == {"forces": approx(0.5)}

    def test_weights_scale_terms(self):
        bundle = PredictionBundle()
        bundle.forces = tensor(np.zeros((2, 3)))
        loss, _ = multitask_loss(bundle, Targets(forces=np.full((2, 3), 0.5)),
                                 weights=LossWeights(force=2.0))
        assert loss.item() == approx(1.0)

    def test_classify_uses_cross_entropy(self):
        bundle = PredictionBundle()
        bundle.class_logit = tensor(np.array(0.0))
        loss, breakdown = multitask_loss(bundle, Targets(class_label=1.0))
        assert breakdown["classify"] == approx(np.log(2.0))

    def test_all_masked_rejected(self):
        bundle = PredictionBundle()
        bundle.forces = tensor(np.zeros((2, 3)))
        with pytest.raises(ValueError, match="masked"):
            multitask_loss(bundle, Targets())

    def test_target_without_head_rejected(self):
        bundle = PredictionBundle()
        bundle.forces = tensor(np.zeros((2, 3)))
        with pytest.raises(ValueError, match="lacks"):
            multitask_loss(bundle, Targets(forces=np.zeros((2, 3)), energy=1.0))

    def test_standardizer_roundtrip_and_constant_guard(self):
        std = EnergyStandardizer().fit([("a", 1.0), ("a", 3.0), ("b", 5.0)])
        z = std.transform("a", 3.0)
        assert std.inverse("a", z) == approx(3.0)
        # a single-sample tag has zero spread; the scale falls back to one
        assert std.transform("b", 6.0) == approx(1.0)

    def test_standardized_energy_enters_loss(self):
        std = EnergyStandardizer().fit([("a", 0.0), ("a", 2.0)])
        bundle = PredictionBundle()
        bundle.energy = tensor(np.array(0.0))
        loss, breakdown = multitask_loss(
            bundle, Targets(energy=2.0, tag="a"), standardizer=std)
        assert breakdown["energy"] == approx(1.0)

    def test_perturb_reproducible_and_molecule_has_no_cell_noise(self, rng):
        sys_ = tiny_crystal()
        a, ex_a, el_a = perturb(sys_, rng=np.random.default_rng(0))
        b, ex_b, el_b = perturb(sys_, rng=np.random.default_rng(0))
        assert_allclose(a.positions, b.positions)
        assert_allclose(ex_a, ex_b)
        assert_allclose(el_a, el_b)
        assert float(np.abs(a.positions - sys_.positions).max()) > 0.0
        _, _, el = perturb(tiny_molecule(), rng=rng)
        assert el is None


class TestTraining:
    def test_lr_schedule_shape(self):
        tc = TrainConfig(lr_max=2e-4, warmup_frac=0.05, warmup_factor=0.2,
                         min_lr_factor=0.01)
        assert lr_at(0, 100, tc) == approx(0.2 * 2e-4)
        assert lr_at(5, 100, tc) == approx(2e-4)
        assert lr_at(99, 100, tc) < 3e-6
        lrs = [lr_at(s, 100, tc) for s in range(100)]
        peak = int(np.argmax(lrs))
        assert all(a <= b + 1e-15 for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
        assert all(a >= b - 1e-15 for a, b in zip(lrs[peak:-1], lrs[peak + 1:]))

    def test_empty_dataset_rejected(self):
        tc = TrainConfig(epochs=1)
        with pytest.raises(ValueError):
            train([], make_supervised_loss(TINY, tc), TINY, tc)

    def test_overfits_single_energy_target(self):
        tc = TrainConfig(epochs=40, batch_size=2, lr_max=5e-3, weight_decay=0.0, seed=0)
        data = [(tiny_crystal(), Targets(energy=1.5, tag="toy"))]
        samples = prepare_samples(data, TINY)
        params, history = train(samples, make_supervised_loss(TINY, tc), TINY, tc)
        assert len(history) == 40
        assert history[-1]["loss"] < 0.25 * history[0]["loss"]
        out = predict(tiny_crystal(), params, TINY, modes=("energy",))
        assert abs(out.energy.item() - 1.5) < 0.5

    def test_zero_clip_norm_freezes_parameters(self):
        tc = TrainConfig(epochs=3, batch_size=1, clip_norm=0.0, seed=0)
        data = prepare_samples([(tiny_crystal(), Targets(energy=1.0, tag="t"))], TINY)
        start = init_params(TINY, seed=9)
        params, _ = train(data, make_supervised_loss(TINY, tc), TINY, tc,
                          params=start.copy())
        assert_allclose(params.flat(), start.flat())

    def test_divergence_guard(self):
        tc = TrainConfig(epochs=3, batch_size=1, divergence_threshold=1e-12, seed=0)
        data = prepare_samples([(tiny_crystal(), Targets(energy=1.0, tag="t"))], TINY)
        with pytest.raises(RuntimeError, match="diverged"):
            train(data, make_supervised_loss(TINY, tc), TINY, tc)

    def test_gradients_cover_used_parameters(self):
        params = init_params(TINY, seed=0)
        out = predict(tiny_crystal(), params, TINY, modes=("energy",))
        grads = gradients(out.energy, params)
        assert set(grads) == set(params.names())
        assert float(np.abs(grads["atom_embed.W"]).max()) > 0.0

    def test_loss_csv_header(self, tmp_path):
        path = tmp_path / "loss.csv"
        write_loss_csv([{"epoch": 0, "loss": 1.0, "lr": 1e-3}], path)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,loss,lr"
        assert len(lines) == 2


class TestMoleculeSupport:
    def test_molecule_prediction_runs(self, rng):
        params = init_params(TINY, seed=0)
        out = predict(random_molecule(rng), params, TINY,
                      modes=("energy", "forces", "property", "classify"))
        assert np.isfinite(out.energy.item())
        assert out.forces.data.shape[1] == 3
