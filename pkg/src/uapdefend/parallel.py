"""Process-parallel generation of independent perturbation candidates.

Each candidate owns a distinct seed, so results are independent of worker
count and scheduling; the bank builder consumes them in attempt order.
Workers are spawned with single-threaded BLAS (the env vars are inherited at
spawn time, after the parent's numpy is already initialized), which avoids
oversubscription on small machines.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from multiprocessing import get_context

import numpy as np

_WORKER_STATE: dict = {}

_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _init_worker(payload):
    from .nnet import Network
    from .target import TargetClassifier

    net = Network.from_specs(payload["input_shape"], payload["specs"], seed=0)
    net.load_param_dict(payload["params"])
    _WORKER_STATE["target"] = TargetClassifier(
        net=net,
        num_classes=payload["num_classes"],
        input_shape=tuple(payload["input_shape"]),
        frozen=True,
    )
    _WORKER_STATE["images"] = payload["images"]


def _run_candidate(args):
    from .uap import InnerSolverParams, compute_uap

    norm_type, xi, delta_target, max_epochs, seed, inner_kwargs, clamp = args
    return compute_uap(
        _WORKER_STATE["target"],
        _WORKER_STATE["images"],
        norm_type,
        xi,
        delta_target,
        max_epochs=max_epochs,
        seed=seed,
        inner=InnerSolverParams(**inner_kwargs),
        clamp=clamp,
    )


def compute_uaps(tc, images, norm_type, xi, delta_target, max_epochs, seeds,
                 inner, clamp, workers, log=None):
    payload = {
        "input_shape": list(tc.input_shape),
        "specs": tc.net.specs(),
        "params": dict(tc.net.param_dict()),
        "num_classes": tc.num_classes,
        "images": np.ascontiguousarray(images, dtype=np.float32),
    }
    inner_kwargs = {
        "max_iter": inner.max_iter,
        "overshoot": inner.overshoot,
        "top_k": inner.top_k,
    }
    tasks = [
        (norm_type, xi, delta_target, max_epochs, int(s), inner_kwargs, bool(clamp))
        for s in seeds
    ]
    saved_env = {v: os.environ.get(v) for v in _BLAS_VARS}
    for v in _BLAS_VARS:
        os.environ[v] = "1"
    try:
        if log is not None:
            log(f"generating {len(tasks)} {norm_type} candidates on {workers} workers")
        with ProcessPoolExecutor(
            max_workers=workers,
            mp_context=get_context("spawn"),
            initializer=_init_worker,
            initargs=(payload,),
        ) as pool:
            results = list(pool.map(_run_candidate, tasks))
    finally:
        for v, old in saved_env.items():
            if old is None:
                os.environ.pop(v, None)
            else:
                os.environ[v] = old
    return results
