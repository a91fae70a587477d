import math

import numpy as np
import pytest
import torch

import oracles
from conftest import tiny_encoder
from gradcheck import check_gradients, pretrain_case
from t2ireid.data import Vocabulary, tokenize_batch
from t2ireid.errors import ContractError, NumericError, ValidationError
from t2ireid.pretrain import (
    DualEncoder,
    EncoderConfig,
    PretrainConfig,
    contrastive_loss,
    load_checkpoint,
    mask_batch,
    mask_tokens,
    max_pool,
    mlm_loss,
    model_from_checkpoint,
    pretrain_loop,
    pretrain_objective,
    record_images,
    save_checkpoint,
    warmup_factor,
)
from t2ireid.toy import build_toy_world, caption_toy_world

# ---------------------------------------------------------------- contrastive


def test_contrastive_identity_two_pairs():
    eye = torch.eye(2, dtype=torch.float64)
    l_i2t, l_t2i, l_con = contrastive_loss(eye, eye, tau=1.0)
    assert float(l_con) == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert float(l_con) == pytest.approx(0.3133, abs=1e-4)
    assert float(l_i2t) == float(l_t2i)


def test_contrastive_matches_oracle(rng):
    for _ in range(10):
        n, d = int(rng.integers(2, 17)), int(rng.integers(1, 33))
        tau = float(rng.uniform(0.5, 20))
        V, T = rng.standard_normal((n, d)), rng.standard_normal((n, d))
        got = contrastive_loss(torch.from_numpy(V), torch.from_numpy(T), tau)
        want = oracles.contrastive(V.tolist(), T.tolist(), tau)
        for g, w in zip(got, want):
            assert float(g) == pytest.approx(w, abs=1e-9)


def test_contrastive_properties(rng):
    V = torch.from_numpy(rng.standard_normal((6, 8)))
    T = torch.from_numpy(rng.standard_normal((6, 8)))
    i2t, t2i, con = contrastive_loss(V, T, 3.0)
    assert float(con) >= 0
    # positive rescaling
    assert float(contrastive_loss(2.5 * V, T, 3.0)[2]) == pytest.approx(float(con), abs=1e-12)
    # V <-> T swaps the directions
    s_i2t, s_t2i, s_con = contrastive_loss(T, V, 3.0)
    assert float(s_i2t) == pytest.approx(float(t2i), abs=1e-12)
    assert float(s_t2i) == pytest.approx(float(i2t), abs=1e-12)
    assert float(s_con) == pytest.approx(float(con), abs=1e-12)
    # well separated + large tau -> 0
    eye = torch.eye(5, dtype=torch.float64)
    assert float(contrastive_loss(eye, eye, 100.0)[2]) < 1e-30


def test_contrastive_errors():
    with pytest.raises(ContractError):
        contrastive_loss(torch.ones(1, 3), torch.ones(1, 3))
    with pytest.raises(ContractError):
        contrastive_loss(torch.ones(2, 3), torch.ones(3, 3))
    bad = torch.ones(2, 3)
    bad[0, 0] = float("nan")
    with pytest.raises(NumericError):
        contrastive_loss(bad, torch.ones(2, 3))


# ---------------------------------------------------------------- mlm


def test_mlm_perfect_prediction_is_zero():
    logits = torch.zeros(3, 10, dtype=torch.float64)
    targets = torch.tensor([1, 4, 9])
    logits[torch.arange(3), targets] = 1000.0
    assert float(mlm_loss(logits, targets)) == 0.0


def test_mlm_uniform_vocab_1000():
    loss = mlm_loss(torch.zeros(5, 1000, dtype=torch.float64), torch.tensor([0, 10, 100, 500, 999]))
    assert float(loss) == pytest.approx(6.9078, abs=1e-4)


def test_mlm_matches_oracle(rng):
    for _ in range(10):
        m, v = int(rng.integers(1, 9)), int(rng.integers(5, 40))
        logits = rng.standard_normal((m, v)) * 3
        targets = rng.integers(0, v, m)
        got = float(mlm_loss(torch.from_numpy(logits), torch.from_numpy(targets)))
        assert got == pytest.approx(oracles.mlm(logits.tolist(), targets.tolist()), abs=1e-9)
        total = float(mlm_loss(torch.from_numpy(logits), torch.from_numpy(targets), reduction="sum"))
        assert total == pytest.approx(m * got, abs=1e-9)


def test_mlm_empty_is_error():
    with pytest.raises(ContractError):
        mlm_loss(torch.zeros(0, 5), torch.zeros(0, dtype=torch.long))


# ---------------------------------------------------------------- masking


@pytest.fixture
def vocab50():
    return Vocabulary.build([" ".join(f"w{i}" for i in range(46))])


def test_mask_rate_zero_forces_one(vocab50, rng):
    ids = tokenize_batch(["w1 w2 w3 w4 w5"], vocab50, 10)[0]
    for _ in range(20):
        m = mask_tokens(ids, vocab50, rng, rate=0.0)
        assert len(m.positions) == 1
        assert 1 <= m.positions[0] <= 5


def test_mask_rate_one_picks_all_eligible(vocab50, rng):
    ids = tokenize_batch(["w1 w2 w3 w4 w5"], vocab50, 10)[0]
    m = mask_tokens(ids, vocab50, rng, rate=1.0)
    assert m.positions.tolist() == [1, 2, 3, 4, 5]
    assert m.targets.tolist() == ids[1:6].tolist()


def test_mask_fraction_and_corruption_split(vocab50):
    rng = np.random.default_rng(0)
    ids = tokenize_batch([" ".join(f"w{(i * 7 + j) % 46}" for j in range(50)) for i in range(220)], vocab50, 51)
    masked, (rows, cols), targets = mask_batch(ids, vocab50, rng, 0.15)
    eligible = int(((ids != vocab50.pad_id) & (ids != vocab50.cls_id)).sum())
    assert eligible >= 10_000
    assert 0.14 <= len(targets) / eligible <= 0.16
    kinds = masked[rows, cols]
    frac_mask = float(np.mean(kinds == vocab50.mask_id))
    assert 0.75 <= frac_mask <= 0.85
    # outside the picked positions nothing changes
    untouched = np.ones_like(ids, dtype=bool)
    untouched[rows, cols] = False
    assert np.array_equal(masked[untouched], ids[untouched])
    assert (masked[:, 0] == vocab50.cls_id).all()


def test_mask_rejects_empty_sequence(vocab50, rng):
    with pytest.raises(ContractError):
        mask_tokens(tokenize_batch([""], vocab50, 5)[0], vocab50, rng)


# ---------------------------------------------------------------- encoders and pooling


def test_max_pool_examples():
    tokens = torch.tensor([[[1.0, -2.0], [0.0, 3.0]]])
    assert max_pool(tokens).tolist() == [[1.0, 3.0]]
    u = torch.tensor([0.5, -1.0, 2.0])
    assert torch.equal(max_pool(u.repeat(1, 4, 1)), u.unsqueeze(0))
    dominated = torch.cat([tokens, torch.tensor([[[0.5, -3.0]]])], dim=1)
    assert torch.equal(max_pool(dominated), max_pool(tokens))


def test_max_pool_mask_and_errors():
    tokens = torch.tensor([[[1.0, 5.0], [9.0, 9.0]]])
    mask = torch.tensor([[True, False]])
    assert max_pool(tokens, mask).tolist() == [[1.0, 5.0]]
    with pytest.raises(ContractError):
        max_pool(tokens, torch.tensor([[False, False]]))


def test_encoder_shapes_and_determinism():
    model = tiny_encoder(vocab_size=12, in_dim=5, width=8, dim=6, max_len=7)
    model.eval()
    images = torch.randn(3, 5, dtype=torch.float64)
    assert model.visual(images).shape == (3, 1, 8)
    ids = torch.randint(4, 12, (3, 7))
    assert model.text(ids).shape == (3, 7, 8)
    assert model.embed_images(images).shape == (3, 6)
    assert torch.equal(model.embed_texts(ids), model.embed_texts(ids))
    with pytest.raises(ContractError):
        model.visual(torch.randn(3, 4, dtype=torch.float64))


def test_padding_does_not_change_text_embedding():
    model = tiny_encoder(max_len=10)
    model.eval()
    short = torch.tensor([[2, 5, 6, 7, 0, 0, 0, 0]])
    longer = torch.tensor([[2, 5, 6, 7, 0, 0, 0, 0, 0, 0]])
    assert torch.allclose(model.embed_texts(short), model.embed_texts(longer), atol=1e-12)


def test_linear_mode_has_no_blocks():
    model = tiny_encoder(mode="linear")
    assert len(model.visual.blocks) == 0 and len(model.text.blocks) == 0


def test_encoder_config_validation():
    with pytest.raises(ValidationError):
        EncoderConfig(vocab_size=10, mode="rnn")
    with pytest.raises(ValidationError):
        EncoderConfig(vocab_size=10, visual_patches=4)


# ---------------------------------------------------------------- objective and gradients


@pytest.mark.parametrize("beta", [0, 1])
def test_objective_gates(beta):
    model, batch = pretrain_case(0)
    loss, rep = pretrain_objective(model, batch, beta, 1.0)
    if beta:
        assert rep.l_mlm is not None
        assert rep.l_pre == rep.l_con + rep.l_mlm
        assert "L_mlm" in rep.as_row()
    else:
        assert rep.l_mlm is None
        assert rep.l_pre == rep.l_con
        assert "L_mlm" not in rep.as_row()
    assert loss.item() == rep.l_pre


def test_objective_rejects_bad_beta():
    model, batch = pretrain_case(0)
    with pytest.raises(ValidationError, match="beta must be 0 or 1"):
        pretrain_objective(model, batch, 2)


@pytest.mark.parametrize("beta", [0, 1])
def test_pretrain_gradients(beta):
    model, batch = pretrain_case(1)
    worst, informative, _ = check_gradients(model, lambda: pretrain_objective(model, batch, beta, 1.0)[0], n=24, seed=1)
    assert informative >= 20
    assert worst < 1e-4


def test_learnable_tau_receives_gradient():
    model, batch = pretrain_case(0)
    cfg = model.cfg
    torch.manual_seed(0)
    model = DualEncoder(cfg, learnable_tau=True, tau=2.0).double()
    assert float(model.tau()) == pytest.approx(2.0)
    loss, _ = pretrain_objective(model, batch, 0)
    loss.backward()
    assert model.log_tau.grad is not None and float(model.log_tau.grad) != 0.0


def test_warmup_then_constant():
    factors = [warmup_factor(s, 100, 0.1) for s in range(100)]
    assert factors[0] == pytest.approx(0.1)
    assert factors[9] == 1.0
    assert all(f == 1.0 for f in factors[9:])
    assert all(a < b for a, b in zip(factors[:9], factors[1:10]))


# ---------------------------------------------------------------- loop


@pytest.fixture(scope="module")
def pairs64():
    world = build_toy_world(seed=3, n_train_ids=8, n_eval_ids=0, images_per_id=8, n_pretrain=0)
    return caption_toy_world(world, seed=3)


def small_config(**kw):
    base = dict(epochs=2, batch_size=16, lr=1e-3, tau=10.0, max_len=40, seed=0,
                encoder={"visual_layers": 1, "text_layers": 1, "visual_width": 32, "text_width": 32, "embed_dim": 32})
    base.update(kw)
    return PretrainConfig(**base)


def full_con(model, manifest, vocab, tau):
    model.eval()
    with torch.no_grad():
        V = model.embed_images(record_images(manifest.records, model.cfg))
        T = model.embed_texts(torch.from_numpy(tokenize_batch([r.caption for r in manifest], vocab, model.cfg.max_len)))
        return float(contrastive_loss(V, T, tau)[2])


def test_two_epochs_reduce_contrastive_loss(pairs64):
    cfg = small_config()
    ckpt = pretrain_loop(pairs64, cfg)
    trained, vocab = model_from_checkpoint(ckpt)
    torch.manual_seed(cfg.seed)
    initial = DualEncoder(EncoderConfig(**ckpt["encoder_config"]), vocab.pad_id)
    assert full_con(trained, pairs64, vocab, cfg.tau) < full_con(initial, pairs64, vocab, cfg.tau)
    assert len(ckpt["history"]) == 2 * (64 // 16)


def test_loop_is_deterministic(pairs64):
    a = pretrain_loop(pairs64, small_config(epochs=1))
    b = pretrain_loop(pairs64, small_config(epochs=1))
    assert a["history"] == b["history"]
    for k in a["model_state"]:
        assert torch.equal(a["model_state"][k], b["model_state"][k])


def test_beta_zero_history_omits_mlm(pairs64):
    h0 = pretrain_loop(pairs64, small_config(epochs=1, beta=0))["history"]
    h1 = pretrain_loop(pairs64, small_config(epochs=1, beta=1))["history"]
    assert all("L_mlm" not in row for row in h0)
    assert all("L_mlm" in row for row in h1)


def test_checkpoint_round_trip(tmp_path, pairs64):
    ckpt = pretrain_loop(pairs64, small_config(epochs=1))
    save_checkpoint(ckpt, tmp_path / "c.pt")
    again = load_checkpoint(tmp_path / "c.pt")
    assert again["config_hash"] == ckpt["config_hash"]
    m1, v1 = model_from_checkpoint(ckpt)
    m2, v2 = model_from_checkpoint(again)
    assert v1 == v2
    x = record_images(pairs64.records[:4], m1.cfg)
    m1.eval(), m2.eval()
    assert torch.equal(m1.embed_images(x), m2.embed_images(x))


def test_load_checkpoint_rejects_other_files(tmp_path):
    torch.save({"hello": 1}, tmp_path / "x.pt")
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "x.pt")


def test_config_validation():
    with pytest.raises(ValidationError, match="beta must be 0 or 1"):
        PretrainConfig(beta=2)
    with pytest.raises(ValidationError):
        PretrainConfig(batch_size=1)
