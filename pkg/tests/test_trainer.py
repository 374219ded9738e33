import json
import warnings

import numpy as np
import pytest

from locore.attention import AttentionPattern
from locore.errors import NonFiniteLossError
from locore.model import ModelConfig, assemble_for, encode_checkpoint, forward, init_model, load_checkpoint
from locore.numerics import OptimizerState, Tape, bce_with_logits
from locore.store import global_topk
from locore.synth import WorldConfig, generate_world, split_world
from locore.trainer import (
    PAD_ID,
    TrainConfig,
    checkpoint_extras,
    restore_state,
    sample_loss,
    sample_training_list,
    train,
    train_step,
)


def tiny_model_cfg(K=4, L=4, d=8, **kw):
    base = dict(layers=1, hidden=16, intermediate=32, heads=2, window_radius=3, max_context=(L + 1) * (K + 1), L=L, K=K, d=d, dropout_rate=0.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def world():
    cfg = WorldConfig(instance_count=6, images_per_instance=4, distractor_images=8, L=4, d=8, patches_per_image=3, patch_pool_per_instance=5, seed=3)
    bank, truth = generate_world(cfg)
    tr, ev = split_world(truth, 0.5, 0)
    return bank, truth, tr


# ---------------------------------------------------------------- config


@pytest.mark.parametrize("bad", [dict(lr=0.0), dict(accumulation_steps=0), dict(weight_decay=-1.0), dict(max_steps=-1)])
def test_train_config_rejects(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_train_config_defaults_and_json(tmp_path):
    cfg = TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.accumulation_steps, cfg.shuffle_enabled) == (5e-5, 0.0, 4, True)
    (tmp_path / "t.json").write_text(json.dumps({"lr": 1e-3, "seed": 4}))
    assert TrainConfig.from_json(tmp_path / "t.json") == TrainConfig(lr=1e-3, seed=4)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1})


def test_warmup_schedule():
    cfg = TrainConfig(lr=1.0, warmup_steps=4)
    assert [cfg.lr_at(s) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]


# ---------------------------------------------------------------- samples


def test_sample_gallery_is_brute_force_topk_with_truth_labels():
    cfg = WorldConfig(instance_count=5, images_per_instance=4, distractor_images=10, L=4, d=8, patches_per_image=3, patch_pool_per_instance=5, seed=9)
    bank, truth = generate_world(cfg)
    q = truth.instances()[0][0]
    s = sample_training_list(bank, truth, q, 8)
    sims = {i: float(bank.globals[q].vector.astype(np.float64) @ bank.globals[i].vector) for i in bank.ids if i != q}
    oracle = sorted(sims, key=lambda i: (-sims[i], bank.ids.index(i)))[:8]
    assert s.gallery_ids == oracle
    assert q not in s.gallery_ids
    assert list(s.image_labels) == [int(truth.same_instance(q, g)) for g in oracle]
    assert s.image_labels.sum() <= 3


def test_all_instance_members_found_when_they_rank_high():
    bank, truth = generate_world(WorldConfig(instance_count=4, images_per_instance=4, distractor_images=0, noise_sigma=0.0, L=4, d=8, patches_per_image=3, patch_pool_per_instance=3, seed=2))
    q = truth.instances()[0][0]
    s = sample_training_list(bank, truth, q, 8)
    # a pool of three patches with three per image makes every sibling identical to the query
    assert s.image_labels.sum() == 3 and list(s.image_labels[:3]) == [1, 1, 1]


def test_distractor_query_has_all_zero_labels(world):
    bank, truth, tr = world
    q = next(i for i, lab in truth.labels.items() if lab is None)
    s = sample_training_list(bank, truth, q, 4, tr)
    assert s.image_labels.sum() == 0 and len(s.gallery_ids) == 4


def test_short_candidate_list_is_padded(world):
    bank, truth, _ = world
    ids = bank.ids[:3]
    s = sample_training_list(bank, truth, ids[0], 4, ids)
    assert s.gallery_ids[2:] == [PAD_ID, PAD_ID] and list(s.padded) == [False, False, True, True]
    assert s.gallery[3].valid_count == 0 and s.image_labels[3] == 0


def test_empty_train_split(world):
    bank, truth, _ = world
    with pytest.raises(ValueError, match="empty"):
        sample_training_list(bank, truth, bank.ids[0], 4, [])


def test_token_labels_broadcast_per_image(world):
    bank, truth, tr = world
    q = truth.instances()[1][0]
    s = sample_training_list(bank, truth, q, 4, tr)
    lab = s.token_labels().reshape(5, 5)
    assert np.all(lab[0] == 0)
    for k in range(4):
        assert np.all(lab[k + 1] == s.image_labels[k])


def test_shuffle_equalises_label_frequency_per_position(world):
    bank, truth, tr = world
    q = truth.instances()[0][0]
    s = sample_training_list(bank, truth, q, 4, tr)
    s.image_labels[:] = [1, 0, 0, 0]
    rng = np.random.default_rng(0)
    freq = np.zeros(4)
    for _ in range(10_000):
        t = s.shuffled(rng)
        freq += t.image_labels
        assert [s.gallery_ids[p] for p in t.permutation] == t.gallery_ids
    np.testing.assert_allclose(freq / 10_000, 0.25, atol=0.02)


# ---------------------------------------------------------------- loss and steps


def test_zero_logits_give_ln2(world):
    bank, truth, tr = world
    m = init_model(tiny_model_cfg())
    m.params["classifier.weight"].value[:] = 0
    m.params["classifier.bias"].value[:] = 0
    s = sample_training_list(bank, truth, truth.instances()[0][0], 4, tr)
    assert float(sample_loss(m, s, None, "eval").value) == pytest.approx(np.log(2), abs=1e-6)


def dense_loss(m, s):
    seq = assemble_for(m, s.query, s.gallery)
    meta = seq.meta
    glob = np.flatnonzero(((meta.role == 0) | (meta.role == 2)) & ~meta.is_padding)
    pat = AttentionPattern(seq.M, seq.M, glob, np.flatnonzero(meta.is_padding))
    out = forward(m, seq, pat)
    return float(bce_with_logits(out.node, s.token_labels(), seq.loss_mask).value)


def test_loss_invariant_to_gallery_permutation_without_positions(world):
    bank, truth, tr = world
    m = init_model(tiny_model_cfg(), dtype=np.float64)
    m.params["pos.image"].value[:] = 0
    seqpos = m.params["pos.sequence"].value
    seqpos[5:] = np.tile(seqpos[5:10], (4, 1))
    s = sample_training_list(bank, truth, truth.instances()[2][0], 4, tr)
    base = dense_loss(m, s)
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert dense_loss(m, s.shuffled(rng)) == pytest.approx(base, abs=1e-12)


def test_padded_images_contribute_nothing(world):
    bank, truth, _ = world
    ids = bank.ids[:3]
    s = sample_training_list(bank, truth, ids[0], 4, ids)
    m = init_model(tiny_model_cfg(), dtype=np.float64)
    seq = assemble_for(m, s.query, s.gallery)
    out = forward(m, seq)
    # moving padded logits arbitrarily must not change the loss
    z = out.node.value.copy()
    pad = seq.meta.is_padding
    assert pad.sum() > 0 and np.all(seq.loss_mask[pad] == 0)
    from locore.numerics import Var

    a = bce_with_logits(Var(z), s.token_labels(), seq.loss_mask)
    z2 = z.copy()
    z2[pad] += 100.0
    b = bce_with_logits(Var(z2), s.token_labels(), seq.loss_mask)
    assert float(a.value) == float(b.value)
    zv = Var(z, requires_grad=True)
    with Tape() as tape:
        tape.backward(bce_with_logits(zv, s.token_labels(), seq.loss_mask))
    assert np.all(zv.grad[pad] == 0)


def test_accumulation_matches_single_batch(world):
    bank, truth, tr = world
    s = sample_training_list(bank, truth, truth.instances()[0][0], 4, tr)
    outs = []
    for acc in (1, 4):
        m = init_model(tiny_model_cfg(), dtype=np.float64)
        cfg = TrainConfig(lr=1e-3, accumulation_steps=acc, shuffle_enabled=False)
        loss, m, _ = train_step(m, [s] * 4, OptimizerState(lr=1e-3), cfg)
        outs.append((loss, m.values()))
    assert outs[0][0] == pytest.approx(outs[1][0], abs=1e-12)
    for k in outs[0][1]:
        np.testing.assert_allclose(outs[0][1][k], outs[1][1][k], atol=1e-6)


def test_accumulation_averages_distinct_micro_batches(world):
    bank, truth, tr = world
    qs = [truth.instances()[i][0] for i in range(4)]
    batch = [sample_training_list(bank, truth, q, 4, tr) for q in qs]
    m = init_model(tiny_model_cfg(), dtype=np.float64)
    losses = [float(sample_loss(m, s, None, "eval").value) for s in batch]
    loss, _, _ = train_step(m, batch, OptimizerState(lr=1e-9), TrainConfig(lr=1e-9, accumulation_steps=2, shuffle_enabled=False))
    assert loss == pytest.approx(np.mean(losses), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_one_small_step_lowers_loss(world, seed):
    bank, truth, tr = world
    batch = [sample_training_list(bank, truth, truth.instances()[i][0], 4, tr) for i in range(2)]
    m = init_model(tiny_model_cfg(seed=seed), dtype=np.float64)
    before = np.mean([float(sample_loss(m, s, None, "eval").value) for s in batch])
    _, m, _ = train_step(m, batch, OptimizerState(lr=1e-4), TrainConfig(lr=1e-4, accumulation_steps=1, shuffle_enabled=False))
    after = np.mean([float(sample_loss(m, s, None, "eval").value) for s in batch])
    assert after < before


def test_non_finite_loss_aborts_without_changes(world, caplog):
    bank, truth, tr = world
    s = sample_training_list(bank, truth, truth.instances()[0][0], 4, tr)
    m = init_model(tiny_model_cfg(), dtype=np.float64)
    m.params["classifier.bias"].value[:] = np.nan
    before = {k: v.copy() for k, v in m.values().items()}
    state = OptimizerState(lr=1e-3)
    with pytest.raises(NonFiniteLossError):
        train_step(m, [s], state, TrainConfig(lr=1e-3))
    assert "non-finite loss" in caplog.text
    assert state.step == 0 and not state.m
    for k, v in m.values().items():
        np.testing.assert_array_equal(v, before[k])


# ---------------------------------------------------------------- loop


def run(world, tmp_path, name, steps=6, **kw):
    bank, truth, tr = world
    m = init_model(tiny_model_cfg(dropout_rate=0.1))
    cfg = TrainConfig(lr=1e-3, micro_batch_size=2, accumulation_steps=2, epochs=100, max_steps=steps, seed=5, **kw)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return train(m, bank, truth, cfg, tr, log_path=tmp_path / f"{name}.jsonl", checkpoint_path=tmp_path / f"{name}.ckpt")


def test_training_is_bitwise_deterministic(world, tmp_path):
    a, b = run(world, tmp_path, "a"), run(world, tmp_path, "b")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    assert encode_checkpoint(a.model) == encode_checkpoint(b.model)


def test_log_records_and_resume(world, tmp_path):
    res = run(world, tmp_path, "r", steps=4, eval_every=2)
    lines = [json.loads(x) for x in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [1, 2, 3, 4]
    assert all(set(r) >= {"step", "loss", "lr"} for r in lines)
    model, extra, tensors = load_checkpoint(tmp_path / "r.ckpt")
    state = restore_state(extra, tensors)
    assert state.step == 4 and extra["train_config"]["seed"] == 5
    assert set(state.m) == set(model.params)
    # resuming for two more steps equals running six straight
    bank, truth, tr = world
    cfg = TrainConfig(**{**extra["train_config"], "max_steps": 2})
    resumed = train(model, bank, truth, cfg, tr, state=state)
    straight = run(world, tmp_path, "s", steps=6)
    for k, v in resumed.model.values().items():
        np.testing.assert_allclose(v, straight.model.values()[k], atol=1e-6)


def test_checkpoint_extras_round_trip():
    st = OptimizerState(lr=2e-3, m={"a": np.ones(2)}, v={"a": np.full(2, 3.0)}, step=9)
    back = restore_state(*checkpoint_extras(st))
    assert back.step == 9 and back.lr == 2e-3
    np.testing.assert_array_equal(back.v["a"], st.v["a"])


def test_ensure_positive_filters_queries(world, tmp_path):
    bank, truth, tr = world
    m = init_model(tiny_model_cfg())
    cfg = TrainConfig(lr=1e-3, micro_batch_size=1, accumulation_steps=1, max_steps=1, ensure_positive=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert train(m, bank, truth, cfg, tr).state.step == 1


def test_no_train_queries(world):
    bank, truth, _ = world
    distractors = [i for i, lab in truth.labels.items() if lab is None]
    with pytest.raises(ValueError):
        train(init_model(tiny_model_cfg()), bank, truth, TrainConfig(), distractors)


def test_shortlists_match_global_topk(world):
    bank, truth, tr = world
    q = tr[0]
    s = sample_training_list(bank, truth, q, 4, tr)
    assert s.gallery_ids == global_topk(bank.globals[q], bank, 4, exclude={q}, candidates=tr).ids[:4]


# ---------------------------------------------------------------- slow: real training runs


@pytest.mark.slow
def test_toy_world_loss_drops_below_threshold():
    """20 instances x 6 images, L=8, K=16: running loss under 0.3 within 2000 steps."""
    from locore.model import make_config

    bank, truth = generate_world(WorldConfig(instance_count=20, images_per_instance=6, L=8, d=32, seed=0))
    tr, _ = split_world(truth, 0.5, 0)
    model = init_model(make_config("toy", L=8, K=16, d=32, dropout_rate=0.0))
    state, losses = None, []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        while len(losses) < 2000:
            cfg = TrainConfig(lr=1e-3, micro_batch_size=8, accumulation_steps=1, max_steps=100)
            res = train(model, bank, truth, cfg, tr, state=state)
            model, state = res.model, res.state
            losses += [r["loss"] for r in res.log]
            if np.mean(losses[-100:]) < 0.3:
                break
    assert np.mean(losses[-100:]) < 0.3, f"running loss {np.mean(losses[-100:]):.3f} after {len(losses)} steps"


@pytest.mark.slow
def test_training_without_shuffle_learns_slot_positions():
    import toyrun

    rho = toyrun.spearman_position_trend(toyrun.trained(shuffle=False).model, toyrun.world(1))
    assert abs(rho) > 0.5, rho
    # the shuffled model has no such trend to lean on
    assert abs(toyrun.spearman_position_trend(toyrun.trained().model, toyrun.world(1))) < abs(rho)
