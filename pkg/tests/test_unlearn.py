import dataclasses

import pytest
import torch

from latent_unlearn.latentops import (AdjacencyOffsets, DegenerateSourceError,
                                      compute_target_latent, estimate_mean_latent,
                                      sample_adjacency_offsets, sample_global_latents,
                                      feasible_exclusion)
from latent_unlearn.nets import build_generator, clone_generator, generate
from latent_unlearn.rng import torch_generator
from latent_unlearn.unlearn import (LossWeights, UnlearnConfig, adjacency_unlearn_loss,
                                    global_preservation_loss, local_unlearn_loss,
                                    run_unlearning, total_loss, with_no_id_preset)


def _gen(seed):
    return torch.Generator().manual_seed(seed)


@pytest.fixture()
def setup(tiny_arch, tiny_bundle, tiny_embedder, tiny_percep):
    g_s = tiny_bundle
    g_u = clone_generator(g_s)
    w_u = torch.randn(16, generator=_gen(1))
    w_t = torch.randn(16, generator=_gen(2))
    weights = LossWeights(l2=1e-2, per=1.0, id=1e-1)
    return g_s, g_u, w_u, w_t, weights, tiny_percep, tiny_embedder


def test_local_loss_zero_at_fixed_point(setup):
    g_s, g_u, w_u, _, weights, percep, embedder = setup
    loss = local_unlearn_loss(g_u, g_s, g_u.renderer, w_u, w_u, weights, percep, embedder)
    assert float(loss) == 0.0


def test_local_loss_zero_weights_zero_gradient(setup):
    g_s, g_u, w_u, w_t, _, percep, embedder = setup
    weights = LossWeights(l2=0.0, per=0.0, id=0.0)
    loss = local_unlearn_loss(g_u, g_s, g_u.renderer, w_u, w_t, weights, percep, embedder)
    assert float(loss) == 0.0
    assert loss.grad_fn is None


def test_local_loss_gradient_matches_finite_difference(tiny_arch, tiny_embedder, tiny_percep):
    g_s = build_generator(tiny_arch, seed=33)
    g_u = clone_generator(g_s)
    for net in (g_s.synthesis, g_s.renderer, g_u.synthesis, g_u.renderer):
        net.double()
    embedder = tiny_embedder.double()
    percep = tiny_percep.double()
    w_u = torch.randn(16, generator=_gen(3), dtype=torch.float64)
    w_t = torch.randn(16, generator=_gen(4), dtype=torch.float64)
    weights = LossWeights(l2=1e-2, per=1.0, id=1e-1)

    def loss_fn():
        return local_unlearn_loss(g_u, g_s, g_u.renderer, w_u, w_t, weights, percep,
                                  embedder)

    loss = loss_fn()
    param = g_u.synthesis.conv1.weight
    grad = torch.autograd.grad(loss, param)[0]
    h = 1e-5
    for idx in ((0, 0, 0, 0), (3, 2, 1, 1), (7, 5, 2, 0)):
        with torch.no_grad():
            param[idx] += h
            f_plus = float(loss_fn())
            param[idx] -= 2 * h
            f_minus = float(loss_fn())
            param[idx] += h
        fd = (f_plus - f_minus) / (2 * h)
        assert abs(float(grad[idx]) - fd) / max(abs(fd), 1e-12) < 1e-4


def test_adjacency_reduces_to_local_with_zero_offset(setup):
    g_s, g_u, w_u, w_t, weights, percep, embedder = setup
    with torch.no_grad():
        for p in g_u.synthesis.parameters():
            p += 0.01
    offsets = AdjacencyOffsets(offsets=torch.zeros(1, 16), scales=torch.zeros(1), seed=0)
    adj = adjacency_unlearn_loss(g_u, g_s, g_u.renderer, w_u, w_t, offsets, weights,
                                 percep, embedder)
    local = local_unlearn_loss(g_u, g_s, g_u.renderer, w_u, w_t, weights, percep, embedder)
    assert torch.allclose(adj, local, rtol=1e-6, atol=1e-9)


def test_adjacency_zero_at_shared_fixed_point(setup):
    g_s, g_u, w_u, _, weights, percep, embedder = setup
    offsets = sample_adjacency_offsets(w_u, 2.0, 3, g_s, torch_generator(5, "adj"))
    loss = adjacency_unlearn_loss(g_u, g_s, g_u.renderer, w_u, w_u, offsets, weights,
                                  percep, embedder)
    assert float(loss) == 0.0


def test_adjacency_matches_mean_of_per_offset_local_losses(setup):
    g_s, g_u, w_u, w_t, weights, percep, embedder = setup
    with torch.no_grad():
        for p in g_u.synthesis.parameters():
            p += 0.02
    offsets = sample_adjacency_offsets(w_u, 2.0, 3, g_s, torch_generator(6, "adj"))
    fused = adjacency_unlearn_loss(g_u, g_s, g_u.renderer, w_u, w_t, offsets, weights,
                                   percep, embedder)
    singles = []
    for delta in offsets.offsets:
        singles.append(local_unlearn_loss(g_u, g_s, g_u.renderer, w_u + delta,
                                          w_t + delta, weights, percep, embedder))
    recomputed = torch.stack(singles).mean()
    assert torch.allclose(fused, recomputed, rtol=1e-5, atol=1e-9)


def test_adjacency_empty_offsets_error(setup):
    g_s, g_u, w_u, w_t, weights, percep, embedder = setup
    empty = AdjacencyOffsets(offsets=torch.zeros(0, 16), scales=torch.zeros(0), seed=0)
    with pytest.raises(ValueError, match="offset"):
        adjacency_unlearn_loss(g_u, g_s, g_u.renderer, w_u, w_t, empty, weights,
                               percep, embedder)


def test_global_loss_zero_on_identical_generators(setup):
    g_s, g_u, _, _, _, percep, _ = setup
    latents = torch.randn(4, 16, generator=_gen(7))
    assert float(global_preservation_loss(g_u, g_s, g_u.renderer, latents, percep)) == 0.0


def test_global_loss_monotone_in_perturbation_scale(setup):
    g_s, _, _, _, _, percep, _ = setup
    latents = torch.randn(4, 16, generator=_gen(8))
    noise = {name: torch.randn(p.shape, generator=_gen(9))
             for name, p in g_s.synthesis.named_parameters()}
    losses = []
    for scale in (1e-3, 1e-2):
        g_u = clone_generator(g_s)
        with torch.no_grad():
            for name, p in g_u.synthesis.named_parameters():
                p += scale * noise[name]
        losses.append(float(global_preservation_loss(g_u, g_s, g_u.renderer, latents,
                                                     percep)))
    assert losses[1] >= losses[0] > 0.0


def test_global_loss_independent_of_embedder(setup):
    g_s, g_u, _, _, _, percep, embedder = setup
    with torch.no_grad():
        for p in g_u.synthesis.parameters():
            p += 0.05
    latents = torch.randn(4, 16, generator=_gen(10))
    before = global_preservation_loss(g_u, g_s, g_u.renderer, latents, percep)
    with torch.no_grad():
        for p in embedder.parameters():
            p += 1.0
    after = global_preservation_loss(g_u, g_s, g_u.renderer, latents, percep)
    assert torch.equal(before, after)


def test_global_loss_empty_latents_error(setup):
    g_s, g_u, _, _, _, percep, _ = setup
    with pytest.raises(ValueError, match="nonempty"):
        global_preservation_loss(g_u, g_s, g_u.renderer, torch.zeros(0, 16), percep)


def test_total_loss_composition():
    cfg = UnlearnConfig(lambda_adj=0.7, lambda_global=0.3)
    local, adj, glob = torch.tensor(0.5), torch.tensor(0.2), torch.tensor(0.1)
    total = total_loss(local, adj, glob, cfg)
    assert abs(float(total) - (0.5 + 0.7 * 0.2 + 0.3 * 0.1)) < 1e-7
    zero_cfg = UnlearnConfig(lambda_adj=0.0, lambda_global=0.0)
    assert float(total_loss(local, adj, glob, zero_cfg)) == pytest.approx(0.5)
    base_cfg = UnlearnConfig(mode="baseline")
    assert float(total_loss(local, adj, glob, base_cfg)) == pytest.approx(0.5)
    assert float(total_loss(torch.tensor(0.0), torch.tensor(0.0), torch.tensor(0.0),
                            cfg)) == 0.0


def test_unlearn_config_validation():
    with pytest.raises(ValueError, match="mode"):
        UnlearnConfig(mode="both")
    with pytest.raises(ValueError, match="lambda_adj"):
        UnlearnConfig(lambda_adj=-1.0)
    with pytest.raises(ValueError, match="iterations"):
        UnlearnConfig(iterations=-1)
    cfg = UnlearnConfig(adjacency_lambda_l2=0.5)
    assert cfg.adjacency_weights.l2 == 0.5
    assert cfg.adjacency_weights.per == cfg.lambda_per
    preset = with_no_id_preset(UnlearnConfig())
    assert preset.lambda_id == 0.0 and preset.adjacency_lambda_id == 0.0


def _mini_cfg(**kw):
    kw.setdefault("iterations", 8)
    kw.setdefault("alpha_max", 2.0)
    kw.setdefault("d", 4.0)
    kw.setdefault("seed", 77)
    return UnlearnConfig(**kw)


def test_run_freezes_mapping_renderer_and_side_nets(setup):
    g_s, _, w_u, _, _, percep, embedder = setup
    render_before = {k: v.clone() for k, v in g_s.renderer.state_dict().items()}
    emb_before = {k: v.clone() for k, v in embedder.state_dict().items()}
    percep_before = {k: v.clone() for k, v in percep.state_dict().items()}
    g_u, record = run_unlearning(g_s, w_u, embedder, percep, _mini_cfg())
    for key, value in render_before.items():
        assert torch.equal(value, g_u.renderer.state_dict()[key])
        assert torch.equal(value, g_s.renderer.state_dict()[key])
    for key, value in emb_before.items():
        assert torch.equal(value, embedder.state_dict()[key])
    for key, value in percep_before.items():
        assert torch.equal(value, percep.state_dict()[key])
    assert any(not torch.equal(a, b) for a, b in
               zip(g_s.synthesis.parameters(), g_u.synthesis.parameters()))
    assert g_u.provenance == "unlearned"
    assert len(record.rows) == 8


def test_run_zero_iterations_is_identity(setup):
    g_s, _, w_u, _, _, percep, embedder = setup
    g_u, record = run_unlearning(g_s, w_u, embedder, percep, _mini_cfg(iterations=0))
    probe = torch.randn(4, 16, generator=_gen(11))
    assert torch.equal(generate(g_u, probe), generate(g_s, probe))
    assert record.rows == []


def test_run_deterministic_bitwise(setup):
    g_s, _, w_u, _, _, percep, embedder = setup
    cfg = _mini_cfg()
    g_a, rec_a = run_unlearning(g_s, w_u, embedder, percep, cfg)
    g_b, rec_b = run_unlearning(g_s, w_u, embedder, percep, cfg)
    for pa, pb in zip(g_a.synthesis.parameters(), g_b.synthesis.parameters()):
        assert torch.equal(pa, pb)
    assert rec_a.rows == rec_b.rows


def test_run_rows_satisfy_exact_sum(setup):
    g_s, _, w_u, _, _, percep, embedder = setup
    cfg = _mini_cfg()
    _, record = run_unlearning(g_s, w_u, embedder, percep, cfg)
    for row in record.rows:
        expected = row["l_local"] + cfg.lambda_adj * row["l_adj"] \
            + cfg.lambda_global * row["l_global"]
        assert abs(row["l_total"] - expected) <= 1e-5 * max(abs(expected), 1e-12)
        assert row["l_adj"] > 0.0 and row["l_global"] >= 0.0


def test_run_baseline_mode_rows(setup):
    g_s, _, w_u, _, _, percep, embedder = setup
    _, record = run_unlearning(g_s, w_u, embedder, percep, _mini_cfg(mode="baseline"))
    for row in record.rows:
        assert row["l_adj"] == 0.0 and row["l_global"] == 0.0
        assert row["l_total"] == row["l_local"]


def test_run_alpha_zero_disables_adjacency(setup):
    g_s, _, w_u, _, _, percep, embedder = setup
    _, record = run_unlearning(g_s, w_u, embedder, percep, _mini_cfg(alpha_max=0.0))
    assert all(row["l_adj"] == 0.0 for row in record.rows)
    # iteration 0 runs on the still-identical clone; drift appears afterwards
    assert record.rows[0]["l_global"] == 0.0
    assert all(row["l_global"] > 0.0 for row in record.rows[1:])


def test_run_fixed_point_is_exact_noop(tiny_arch, tiny_embedder, tiny_percep):
    # G_u = G_s and w_t = w_u: every loss term is exactly zero and one Adam
    # step must not move any parameter.
    g_s = build_generator(tiny_arch, seed=44)
    g_u = clone_generator(g_s)
    w_u = torch.randn(16, generator=_gen(12))
    weights = LossWeights(l2=1e-2, per=1.0, id=1e-1)
    before = [p.clone() for p in g_u.synthesis.parameters()]
    loss = local_unlearn_loss(g_u, g_s, g_u.renderer, w_u, w_u, weights, tiny_percep,
                              tiny_embedder)
    assert float(loss) == 0.0
    opt = torch.optim.Adam(g_u.synthesis.parameters(), lr=1e-4)
    opt.zero_grad()
    loss.backward()
    opt.step()
    for prev, now in zip(before, g_u.synthesis.parameters()):
        assert torch.equal(prev, now)


def test_run_propagates_degenerate_source(setup):
    g_s, _, _, _, _, percep, embedder = setup
    cfg = _mini_cfg()
    w_bar = estimate_mean_latent(g_s, gen=torch_generator(cfg.seed, "mean-latent"))
    with pytest.raises(DegenerateSourceError):
        run_unlearning(g_s, w_bar, embedder, percep, cfg)


def test_run_aborts_on_non_finite_loss(setup):
    g_s, _, w_u, _, _, percep, embedder = setup
    with torch.no_grad():
        g_s.synthesis.lift.weight[0, 0] = float("nan")
    with pytest.raises(RuntimeError, match="iteration 0"):
        run_unlearning(g_s, w_u, embedder, percep, _mini_cfg())


def test_run_first_iteration_matches_standalone_losses(setup):
    # The fused training path must produce the same component values as the
    # public loss functions evaluated on the pre-step clone.
    g_s, _, w_u, _, _, percep, embedder = setup
    cfg = _mini_cfg(iterations=1)
    _, record = run_unlearning(g_s, w_u, embedder, percep, cfg)
    row = record.rows[0]

    g_u0 = clone_generator(g_s)
    w_bar = estimate_mean_latent(g_s, gen=torch_generator(cfg.seed, "mean-latent"))
    w_t = compute_target_latent(w_u, w_bar, cfg.d)
    offsets = sample_adjacency_offsets(w_u, cfg.alpha_max, cfg.n_a, g_s,
                                       torch_generator(cfg.seed, "adjacency", 0))
    latents = sample_global_latents(cfg.n_g, g_s, torch_generator(cfg.seed, "global", 0),
                                    feasible_exclusion(w_u, w_t, cfg.alpha_max, 16))
    l_local = local_unlearn_loss(g_u0, g_s, g_u0.renderer, w_u, w_t, cfg.local_weights,
                                 percep, embedder)
    l_adj = adjacency_unlearn_loss(g_u0, g_s, g_u0.renderer, w_u, w_t, offsets,
                                   cfg.adjacency_weights, percep, embedder)
    l_glob = global_preservation_loss(g_u0, g_s, g_u0.renderer, latents, percep)
    assert row["l_local"] == pytest.approx(float(l_local), rel=1e-5, abs=1e-9)
    assert row["l_adj"] == pytest.approx(float(l_adj), rel=1e-5, abs=1e-9)
    assert row["l_global"] == pytest.approx(float(l_glob), rel=1e-5, abs=1e-9)


def test_record_csv_and_json_roundtrip(tmp_path, setup):
    g_s, _, w_u, _, _, percep, embedder = setup
    _, record = run_unlearning(g_s, w_u, embedder, percep, _mini_cfg(iterations=3))
    record.source_checkpoint = "src"
    record.unlearned_checkpoint = "dst"
    record.write_losses_csv(tmp_path / "losses.csv")
    record.write_run_json(tmp_path / "run.json")
    import csv as csv_mod
    import json
    with open(tmp_path / "losses.csv", newline="") as fh:
        rows = list(csv_mod.DictReader(fh))
    assert len(rows) == 3
    assert float(rows[0]["l_total"]) == pytest.approx(record.rows[0]["l_total"])
    doc = json.loads((tmp_path / "run.json").read_text())
    assert doc["config"]["mode"] == "guide"
    assert doc["source_checkpoint"] == "src"
    assert doc["seeds"]["master"] == record.config.seed
