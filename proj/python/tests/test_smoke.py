import math
from pathlib import Path

import numpy as np
import pytest

import smoe

ROOT = Path(__file__).resolve().parents[2]
CONFIG = ROOT / "configs" / "tiny.toml"


def test_aux_loss_worked_values():
    assert smoe.aux_loss_scratch([[0.3, 0.1]], 1e-4) == pytest.approx(5e-5, abs=1e-18)
    assert smoe.aux_loss_finetune([[0.9, 0.3, 0.1, 0.2]], 1e-2, [[0]]) == pytest.approx(5e-3, abs=1e-17)


def test_metrics():
    assert smoe.coefficient_of_variation([0.4, 0.4, 0.4]) == 0.0
    assert smoe.coefficient_of_variation([0.3, 0.1]) == pytest.approx(0.5)
    r = smoe.head_imbalance([[0.3, 0.1], [0.2, 0.2]])
    assert r["cv_per_layer"] == pytest.approx([0.5, 0.0])
    assert r["overall"] == pytest.approx(0.25)
    assert smoe.select_top_m_heads([[0.5, 0.9, 0.9]], 1) == [[1]]


def naive_attention(q, k, v, variant, sink):
    """Per-head softmax with the sink logit in the denominator, in numpy."""
    b, t, h, d = q.shape
    out = np.zeros_like(q)
    gate = np.ones((b, t, h))
    for bi in range(b):
        for hi in range(h):
            z = q[bi, :, hi] @ k[bi, :, hi].T / math.sqrt(d)
            z[np.triu_indices(t, 1)] = -np.inf
            if variant == "sink":
                m = np.maximum(z.max(axis=1), sink[hi])
                e = np.exp(z - m[:, None])
                denom = e.sum(axis=1) + np.exp(sink[hi] - m)
                w = e / denom[:, None]
                gate[bi, :, hi] = 1 - np.exp(sink[hi] - m) / denom
            else:
                w = np.exp(z - z.max(axis=1, keepdims=True))
                w /= w.sum(axis=1, keepdims=True)
                if variant == "vanilla":
                    gate[bi, :, hi] = 1 - w[:, 0]
            out[bi, :, hi] = w @ v[bi, :, hi]
    return out, gate


@pytest.mark.parametrize("variant", ["vanilla", "sink", "gated"])
def test_attention_matches_numpy(variant):
    rng = np.random.default_rng(0)
    q, k, v = (rng.uniform(-2, 2, size=(2, 40, 3, 4)) for _ in range(3))
    sink = rng.uniform(-3, 3, size=3)
    out, gate = smoe.attention(q, k, v, variant, sink if variant == "sink" else None)
    ref_out, ref_gate = naive_attention(q, k, v, variant, sink)
    np.testing.assert_allclose(out, ref_out, rtol=0, atol=1e-12)
    np.testing.assert_allclose(gate, ref_gate, rtol=0, atol=1e-12)


def test_attention_rejects_bad_shapes():
    with pytest.raises(ValueError):
        smoe.attention(np.zeros((1, 4, 2, 2)), np.zeros((1, 4, 2, 3)), np.zeros((1, 4, 2, 2)))
    with pytest.raises(ValueError):
        smoe.attention(np.zeros((1, 4, 2, 2)), np.zeros((1, 4, 2, 2)), np.zeros((1, 4, 2, 2)), "sink")


def test_verify_short_run():
    r = smoe.verify(seed=2, cases=20)
    assert r["passed"]
    assert {x["name"] for x in r["results"]} >= {"fused_eager", "zero_value_identity"}


def test_model_train_eval_roundtrip(tmp_path):
    model = smoe.Model.create(str(CONFIG), ["train.steps=20", "train.eval_every=10"])
    assert smoe.config_of(model)["model"]["n_heads"] == 4
    text = (ROOT / "data" / "corpus.txt").read_bytes()[:20000].decode("utf-8", "replace")
    untrained = model.evaluate(text)
    assert abs(untrained["bpb"] - math.log2(257)) < 0.1
    log = model.train()
    assert [r["step"] for r in log] == [0, 10]
    assert model.step == 20
    assert model.evaluate(text)["bpb"] < untrained["bpb"]
    imp = model.importance(text, max_windows=8)
    assert len(imp) == 2 and len(imp[0]) == 4
    path = tmp_path / "m.smoe"
    model.save(str(path))
    loaded = smoe.Model.load(str(path))
    assert loaded.step == 20
    assert loaded.evaluate(text) == model.evaluate(text)
    z = loaded.zero_first_value(text, tau=1.0)
    assert z["heads_flagged"] == 0 and z["bpb_selective"] == z["bpb_none"]


def test_errors():
    with pytest.raises(ValueError):
        smoe.Model.create(str(CONFIG), ["no.such.key=1"])
    with pytest.raises(ValueError):
        smoe.Model.load("/no/such/checkpoint")
