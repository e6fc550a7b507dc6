"""Fast sanity checks bundled with the package (``fwdtta selftest``).

These are reduced-size versions of the test-suite oracles, meant to run in a
few seconds on an installed copy without pytest.
"""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Architecture, fit_source_model, make_dataset
from .engine import AdaptConfig, Adapter
from .knowledge import KnowledgeBase, layer_cosine, max_layer_mean_abs
from .model import FeatureStats, LayeredVector, ParamSchema, pooled_stats
from .numerics import make_rng
from .objective import alignment_term, calibrate_source_stats, entropy_term
from .quant import QuantSpec, quantization_error_variance
from .shift import FULL_GAUSSIAN, PAPER_LITERAL, BatchProfile, distance
from .zo import PerturbConfig, spsa_estimate


def _schema(rng, layers=4):
    sizes = tuple(int(s) for s in rng.integers(2, 6, size=layers))
    return ParamSchema(tuple(f"l{i}" for i in range(layers)), sizes)


def check_quant(rng) -> str:
    spec = QuantSpec(4, 1.0)
    emp, pred = quantization_error_variance(spec, rng, 200_000)
    assert abs(emp / pred - 1) < 0.05, (emp, pred)
    return f"var ratio {emp / pred:.4f}"


def check_spsa(rng) -> str:
    A = rng.normal(size=(16, 16))
    H = A @ A.T / 16 + np.eye(16)
    b = rng.normal(size=16)
    x0 = rng.normal(size=16)
    cfg = PerturbConfig(scale=1e-3, distribution="rademacher")
    f = lambda x: 0.5 * x @ H @ x + b @ x  # noqa: E731
    ests, evals = zip(*(spsa_estimate(f, x0, cfg, rng) for _ in range(2000)))
    g = H @ x0 + b
    err = np.linalg.norm(np.mean(ests, axis=0) - g) / np.linalg.norm(g)
    assert set(evals) == {2}
    assert err < 0.15, err
    return f"rel err {err:.3f}"


def check_ensemble(rng) -> str:
    schema = _schema(rng)
    kb = KnowledgeBase.with_zero_vector(schema, capacity=8)
    theta = LayeredVector.zeros(schema)
    worst = 0.0
    for _ in range(100):
        theta = theta + LayeredVector(schema, rng.normal(0, rng.choice([0.001, 0.05]), size=schema.total))
        kb.logits = kb.logits + rng.normal(0, 0.3, size=len(kb))
        before = kb.aggregate(theta)
        theta = kb.preserve(theta)
        worst = max(worst, float(np.max(np.abs(kb.aggregate(theta).data - before.data))))
        kb.evict_if_full()
    assert worst <= 1e-12, worst
    return f"max drift {worst:.1e}"


def check_alpha(rng) -> str:
    schema = _schema(rng)
    kb = KnowledgeBase.with_zero_vector(schema)
    theta = LayeredVector(schema, rng.normal(0, 0.2, size=schema.total))
    m, s = kb.shrink_factor(theta)
    new = kb.preserve(theta)
    alpha = kb.alphas()[-1]
    assert abs(alpha - (s - 1) / s) < 1e-9
    assert abs(max_layer_mean_abs(new) - kb.magnitude_cap) < 1e-9
    small = LayeredVector(schema, np.full(schema.total, 0.5 * kb.magnitude_cap))
    kb.preserve(small)
    assert kb.alphas()[-1] == 0.0
    return f"alpha {alpha:.6f} for m={m:.3f}"


def check_eviction(rng) -> str:
    schema = _schema(rng, layers=3)
    kb = KnowledgeBase(schema, capacity=6)
    for _ in range(60):
        v = LayeredVector(schema, rng.normal(size=schema.total))
        if len(kb) > 6:
            raise AssertionError("capacity exceeded")
        kb._append(v, 0.0)
        if len(kb) > kb.capacity:
            vecs = list(kb.vectors)
            best = max(itertools.combinations(range(len(vecs)), 2),
                       key=lambda kp: (layer_cosine(vecs[kp[0]].delta, vecs[kp[1]].delta), -kp[0], -kp[1]))
            expect = min(vecs[best[0]].index, vecs[best[1]].index)
            kb.evict_if_full()
            assert expect not in kb.indices
    assert len(kb) == 6
    return "60 insertions, oracle agrees"


def check_objective(rng) -> str:
    ent = entropy_term(np.zeros((8, 10)))
    assert abs(ent - np.log(10) / 10) < 1e-9
    feats = [rng.normal(size=(16, 5)) for _ in range(3)]
    st = FeatureStats(*map(list, zip(*(pooled_stats(f) for f in feats))))
    assert alignment_term(st, st) == 0.0
    return f"entropy {ent:.6f}"


def check_shift(rng) -> str:
    mean, std = rng.normal(size=8), rng.uniform(0.5, 2, size=8)
    p = BatchProfile(mean, std)
    assert distance(p, p, FULL_GAUSSIAN) == 0.0
    lit = distance(p, p, PAPER_LITERAL)
    assert abs(lit - 1.0) < 1e-12
    jumped = BatchProfile(mean + 5 * std, std)
    assert distance(p, jumped, FULL_GAUSSIAN) > 0.1
    return f"literal self-distance {lit:.3f}"


def check_two_pass(rng) -> str:
    ds = make_dataset("synthetic-blobs", {"dim": 8, "num_classes": 3, "n_train": 200, "n_test": 128}, rng)
    model = fit_source_model(Architecture("mlp", widths=(8, 8)), ds, 8, rng)
    stats = calibrate_source_stats(model, ds.x_calib[:32])
    model.reset_counter()
    ad = Adapter(AdaptConfig(batch_size=32, seed=0), model, stats)
    for i in range(4):
        ad.adapt_batch(ds.x_test[32 * i:32 * (i + 1)], y=ds.y_test[32 * i:32 * (i + 1)])
    assert ad.state.fp_count == 8 and model.forward_count == 8
    blob = save_checkpoint(None, model, stats, ad.state.kb)
    m2, s2, kb2 = load_checkpoint(blob)
    assert save_checkpoint(None, m2, s2, kb2) == blob
    return "8 forwards for 4 batches; checkpoint round-trips"


CHECKS: dict[str, Callable] = {
    "quantization error variance": check_quant,
    "spsa fidelity": check_spsa,
    "ensemble invariance": check_ensemble,
    "alpha closed form": check_alpha,
    "eviction oracle": check_eviction,
    "objective arithmetic": check_objective,
    "shift detector": check_shift,
    "two-pass budget": check_two_pass,
}


def run_all(seed: int = 0, out=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            msg = fn(make_rng(seed))
            out(f"PASS  {name}: {msg}")
        except AssertionError as exc:
            ok = False
            out(f"FAIL  {name}: {exc}")
    return ok
