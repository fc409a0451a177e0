from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck
from printguard.embedding import (EMBED_DIM, PROJ_DIM, PROJ_HIDDEN, CorruptionPolicy, EncoderLookupError,
                                  ExternalEncoder, HashedEncoder, ProjectionHead, UndefinedCosineError,
                                  contrastive_loss, corrupt, corrupted_pairs, encode,
                                  mean_pairwise_cosine, pair_loss_and_grads, project, train_projection)
from printguard.features import sentence_digest, serialize_record
from printguard.optim import TrainConfig

ENC = HashedEncoder(seed=0)
SENT = "extruder_temp=200.0000 | bed_temp=60.0000 | gcodein=12.0000"


def synthetic_sentences(n: int, seed: int = 0) -> list[str]:
    rng = np.random.default_rng(seed)
    rows = np.column_stack([200 + rng.normal(0, 0.3, n), 60 + rng.normal(0, 0.1, n),
                            rng.integers(5, 30, n), rng.uniform(0, 4, n)])
    return [serialize_record(r, ("extruder_temp", "bed_temp", "gcodein", "flow_rate")).text for r in rows]


def test_encoder_deterministic_and_normalized():
    a, b = ENC.encode(SENT), HashedEncoder(seed=0).encode(SENT)
    assert a.shape == (EMBED_DIM,) and np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-9)


def test_one_value_change_lowers_cosine():
    other = SENT.replace("gcodein=12.0000", "gcodein=13.0000")
    cos = float(ENC.encode(SENT) @ ENC.encode(other))
    assert cos < 1.0
    near = SENT.replace("gcodein=12.0000", "gcodein=12.0100")
    assert float(ENC.encode(SENT) @ ENC.encode(near)) > cos  # nearby values stay closer


def test_external_encoder_lookup():
    vec = np.arange(EMBED_DIM, dtype=float)
    ext = ExternalEncoder({sentence_digest(SENT): vec})
    assert np.array_equal(encode(ext, SENT), vec)
    with pytest.raises(EncoderLookupError):
        ext.encode("missing=1.0000")


def test_zero_head_gives_zero():
    assert np.array_equal(project(ProjectionHead.zeros(), ENC.encode(SENT)), np.zeros(PROJ_DIM))


def test_identity_block_passthrough():
    head = ProjectionHead.zeros()
    head.W1[:, :PROJ_HIDDEN] = np.eye(PROJ_HIDDEN)
    rng = np.random.default_rng(1)
    head.W2[:] = rng.normal(size=head.W2.shape)
    h = np.abs(rng.normal(size=EMBED_DIM))
    assert np.allclose(project(head, h), head.W2 @ h[:PROJ_HIDDEN], atol=1e-12)


def test_projection_matches_matrix_oracle():
    head = ProjectionHead.init(seed=4)
    head.b1[:] = np.random.default_rng(5).normal(size=PROJ_HIDDEN) * 0.01
    h = ENC.encode(SENT)
    hidden = [max(0.0, sum(head.W1[i, j] * h[j] for j in range(EMBED_DIM)) + head.b1[i]) for i in range(PROJ_HIDDEN)]
    expect = [sum(head.W2[i, j] * hidden[j] for j in range(PROJ_HIDDEN)) + head.b2[i] for i in range(PROJ_DIM)]
    assert np.allclose(project(head, h), expect, atol=1e-6)


def test_init_bounds():
    head = ProjectionHead.init(seed=0)
    assert np.abs(head.W1).max() <= 1 / np.sqrt(EMBED_DIM)
    assert np.abs(head.W2).max() <= 1 / np.sqrt(PROJ_HIDDEN)


def test_corruption_minimum_one_rule():
    policy = CorruptionPolicy(key_swaps=0, value_rate=0.0)
    out = corrupt(SENT, seed=3, policy=policy)
    assert out != SENT
    changed = [(a, b) for a, b in zip(SENT.split(" | "), out.split(" | ")) if a != b]
    assert len(changed) == 1 and changed[0][0].split("=")[1] == changed[0][1].split("=")[1]


def test_extruder_becomes_toolhead():
    policy = CorruptionPolicy(key_swaps=1, value_rate=0.0)
    for seed in range(50):
        out = corrupt(SENT, seed, policy)
        if "toolhead_temp" in out:
            assert out.startswith("toolhead_temp=200.0000")
            break
    else:
        pytest.fail("no seed swapped the extruder key")


def test_corruption_deterministic():
    assert corrupt(SENT, 9) == corrupt(SENT, 9)


def test_contrastive_loss_cases():
    z = np.zeros(PROJ_DIM)
    z[0] = 1.0
    assert contrastive_loss(z, z) == 0.0
    assert contrastive_loss(z, -z) == 2.0
    zp = z.copy()
    zp[1] = 1.0
    assert contrastive_loss(z, zp) == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-12)
    with pytest.raises(UndefinedCosineError):
        contrastive_loss(np.zeros(3), np.zeros(3))


def head_gradcheck(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    head = ProjectionHead.init(seed)
    head.b1[:] = rng.normal(size=PROJ_HIDDEN) * 0.05
    head.b2[:] = rng.normal(size=PROJ_DIM) * 0.05
    sentences = synthetic_sentences(6, seed)
    H, Hc = corrupted_pairs(sentences, ENC, seed)
    _, grads, _ = pair_loss_and_grads(head, H, Hc)
    params = head.params()
    return gradcheck.check(lambda: pair_loss_and_grads(head, H, Hc)[0], params, grads, rng)


@pytest.mark.parametrize("seed", range(5))
def test_head_gradients_match_finite_differences(seed):
    errors = head_gradcheck(seed)
    assert max(errors.values()) < gradcheck.REL_TOL, errors


def test_training_descends_and_is_deterministic():
    sentences = synthetic_sentences(2000)
    cfg = TrainConfig(lr=1e-4, batch_size=64, epochs=25, seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pairs = corrupted_pairs(sentences, ENC, cfg.seed)
        before = ENC.encode_batch(sentences[:50]).copy()
        head, hist = train_projection(sentences, ENC, cfg, pairs=pairs)
        again, _ = train_projection(sentences, ENC, cfg, pairs=pairs)
    assert hist.epoch_loss[-1] < hist.epoch_loss[0]
    assert all(0.0 <= v <= 2.0 for v in hist.batch_loss)
    assert len(hist.batch_variance) == len(hist.batch_loss)
    for name, p in head.params().items():
        assert np.array_equal(p, again.params()[name])
    assert np.array_equal(ENC.encode_batch(sentences[:50]), before)  # frozen encoder


def test_zero_learning_rate_keeps_parameters():
    sentences = synthetic_sentences(100)
    start = ProjectionHead.init(0)
    head, _ = train_projection(sentences, ENC, TrainConfig(lr=0.0, epochs=2, seed=0), head=start)
    for name, p in head.params().items():
        assert np.array_equal(p, start.params()[name])


def test_collapse_warning_fires():
    from printguard.embedding import CollapseWarning

    head = ProjectionHead.zeros()
    head.b2[0] = 1.0  # every input maps to the same point
    head.W1[:] = np.random.default_rng(0).normal(size=head.W1.shape) * 1e-3
    sentences = synthetic_sentences(64)
    with pytest.warns(CollapseWarning):
        _, hist = train_projection(sentences, ENC, TrainConfig(lr=1e-4, epochs=1), head=head)
    assert hist.warnings
    assert mean_pairwise_cosine(np.ones((3, 4))) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=6), st.integers(0, 2**31))
def test_encoder_unit_norm_property(values, seed):
    sent = serialize_record(values, tuple(f"k{i}" for i in range(len(values)))).text
    v = HashedEncoder(seed=seed % 7).encode(sent)
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)
