"""Scaled-down synthetic experiments used by the acceptance suite.

Each runner is a pure function of its arguments and returns a JSON-ready
dict holding the per-epoch training logs and the final metrics, so two calls
with the same arguments can be compared byte for byte.
"""
from __future__ import annotations

import numpy as np

from .data import SyntheticSpec, generate
from .metrics import cooccurring_map, per_frame_map
from .model import CTRN, CtrnConfig
from .training import fit, pad_batch, predict_logits

# Independent synthetic classes overlap on roughly 13% of snippets, well
# above the default co-occurrence threshold, which would link every pair.
SYNTHETIC_THETA = 0.3

OVERFIT_SPEC = dict(C=10, T=64, D1=64, num_videos=20, co_pairs=[[0, 1, 0.8]],
                    order_pairs=[[2, 3, [1, 4]]])

# Two co-occurring pairs and three ordered pairs; targets of the ordered
# pairs are recoverable from the preceding action as well as their own
# features.
ABLATION_SPEC = dict(C=10, T=64, D1=64, noise_sigma=1.0,
                     co_pairs=[[0, 1, 0.9], [2, 3, 0.9]],
                     order_pairs=[[4, 5, [1, 3]], [6, 7, [1, 3]], [1, 8, [1, 3]]])
ABLATION_VARIANTS = {
    "rtm": dict(use_cgcn=False, use_tcn=False),
    "tcn": dict(use_cgcn=False),
    "full": {},
}

# Near-deterministic pairs whose targets have faint prototypes, so that the
# partner class is the main evidence for the target.
GCLASSIFIER_SPEC = dict(C=10, T=64, D1=64, noise_sigma=1.0,
                        co_pairs=[[0, 1, 0.95], [2, 3, 0.95], [4, 5, 0.95]],
                        class_scales=[1, 0.3, 1, 0.3, 1, 0.3, 1, 1, 1, 1])


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _pairs(videos):
    return [(v.features, v.labels) for v in videos]


def _scores(model, videos):
    return [_sigmoid(z) for z in predict_logits(model, [v.features for v in videos])]


def initial_loss(seed: int = 0, **model_kw) -> float:
    """Total loss of a freshly initialised model on the first overfit batch."""
    videos = generate(SyntheticSpec(seed=seed, **OVERFIT_SPEC))[:8]
    cfg = CtrnConfig(**{"D1": 64, "D2": 16, "C": 10, "L": 3, **model_kw})
    model = CTRN(cfg, seed=seed)
    X, Y, mask = pad_batch([v.features for v in videos], [v.labels for v in videos])
    return float(model.loss(X, Y, mask, training=True).data)


def overfit_run(seed: int = 0, epochs: int = 200) -> dict:
    """Train on 20 synthetic videos and score the same videos."""
    videos = generate(SyntheticSpec(seed=seed, **OVERFIT_SPEC))
    model = CTRN(CtrnConfig(D1=64, D2=16, C=10, L=3), seed=seed)
    res = fit(model, _pairs(videos), None, epochs=epochs, seed=seed)
    train_map = per_frame_map(_scores(model, videos), [v.labels for v in videos]).map
    return {"seed": seed, "epochs": epochs, "train_map": train_map, "log": res.log}


def _split(spec_kw, seed, n_train, n_val, n_test):
    videos = generate(SyntheticSpec(num_videos=n_train + n_val + n_test, seed=seed, **spec_kw))
    return videos[:n_train], videos[n_train:n_train + n_val], videos[n_train + n_val:]


def ablation_run(seeds=(0, 1, 2), epochs: int = 60, n_train: int = 100, n_val: int = 10,
                 n_test: int = 30, theta: float = SYNTHETIC_THETA) -> dict:
    """Held-out mAP of the RTM-only, RTM+TCN and full models."""
    out = {name: {"test_map": [], "logs": []} for name in ABLATION_VARIANTS}
    for seed in seeds:
        tr, va, te = _split(ABLATION_SPEC, 100 + seed, n_train, n_val, n_test)
        for name, toggles in ABLATION_VARIANTS.items():
            model = CTRN(CtrnConfig(D1=64, D2=16, C=10, L=3, theta=theta, **toggles),
                         seed=seed)
            res = fit(model, _pairs(tr), _pairs(va), epochs=epochs, seed=seed)
            out[name]["test_map"].append(per_frame_map(_scores(model, te), [v.labels for v in te]).map)
            out[name]["logs"].append(res.log)
    for name in out:
        out[name]["mean"] = float(np.mean(out[name]["test_map"]))
    return {"seeds": list(seeds), "epochs": epochs, "variants": out}


def gclassifier_run(seeds=(0, 1, 2), epochs: int = 40, n_train: int = 40, n_val: int = 10,
                    n_test: int = 30, theta: float = SYNTHETIC_THETA) -> dict:
    """Co-occurring-snippet test mAP with the graph classifier and with identity adjacency."""
    variants = {"gclassifier": True, "identity": False}
    out = {name: {"cooccurring_map": [], "logs": []} for name in variants}
    for seed in seeds:
        tr, va, te = _split(GCLASSIFIER_SPEC, 200 + seed, n_train, n_val, n_test)
        for name, flag in variants.items():
            model = CTRN(CtrnConfig(D1=64, D2=16, C=10, L=3, use_gclassifier=flag,
                                    theta=theta), seed=seed)
            res = fit(model, _pairs(tr), _pairs(va), epochs=epochs, seed=seed)
            m = cooccurring_map(_scores(model, te), [v.labels for v in te]).map
            out[name]["cooccurring_map"].append(m)
            out[name]["logs"].append(res.log)
    for name in out:
        out[name]["mean"] = float(np.mean(out[name]["cooccurring_map"]))
    return {"seeds": list(seeds), "epochs": epochs, "variants": out}
