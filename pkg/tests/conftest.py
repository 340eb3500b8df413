import os
from pathlib import Path

import numpy as np
import pytest
import torch

from skelevision.checkpoint import load_checkpoint
from skelevision.data import load_training_data, synth_sprite_dataset, ingest_sequences, load_frame
from skelevision.model import build_model
from skelevision.train import TrainConfig, run_is_complete, train, RunRecord

# Cached across pytest invocations; keyed by config digests, so stale reuse
# is impossible. Override with SKELEVISION_TEST_CACHE.
CACHE = Path(os.environ.get("SKELEVISION_TEST_CACHE", "/tmp/skelevision-test-cache"))

SYNTH_PARAMS = dict(n_sequences=8, frames_per_seq=36, frame_size=160, n_stills=40)
EVAL_PARAMS = dict(n_sequences=5, frames_per_seq=36, frame_size=160, n_stills=0)

TRAIN_CFG = TrainConfig(
    mode="stl", lambda_k=0.0, epochs=20, steps_per_epoch=20, seed=0, lr=8e-4
)


@pytest.fixture(scope="session")
def synth_root() -> Path:
    root = CACHE / "dataset-v1"
    if not (root / "train" / "meta.json").exists():
        synth_sprite_dataset(root / "train", seed=0, **SYNTH_PARAMS)
        synth_sprite_dataset(root / "eval", seed=1000, **EVAL_PARAMS)
    return root


@pytest.fixture(scope="session")
def train_data(synth_root):
    return load_training_data(synth_root / "train")


@pytest.fixture(scope="session")
def eval_sequences(synth_root):
    records = [r for r in ingest_sequences(synth_root / "eval") if r.split == "train"]
    return [
        (r.name, np.stack([load_frame(p) for p in r.frame_paths]), r.gt_boxes)
        for r in records[:5]
    ]


@pytest.fixture(scope="session")
def trained_run(synth_root, train_data) -> RunRecord:
    """The 20-epoch desk-scale STL run shared by tracking/attack/acceptance tests."""
    run_dir = CACHE / f"run-{TRAIN_CFG.digest()}"
    if run_is_complete(run_dir):
        return RunRecord.read(run_dir)
    return train(TRAIN_CFG, train_data, run_dir)


@pytest.fixture(scope="session")
def trained_model(trained_run):
    model = build_model(TRAIN_CFG.model_config())
    load_checkpoint(trained_run.checkpoint_path, model)
    model.eval()
    return model


def finite_difference_grad(fn, x: torch.Tensor, coords, eps: float = 1e-5) -> dict:
    """Central finite differences of scalar fn(x) at selected flat coords."""
    grads = {}
    flat = x.detach().clone().reshape(-1)
    for c in coords:
        orig = float(flat[c])
        flat[c] = orig + eps
        hi = float(fn(flat.reshape(x.shape)).detach())
        flat[c] = orig - eps
        lo = float(fn(flat.reshape(x.shape)).detach())
        flat[c] = orig
        grads[c] = (hi - lo) / (2 * eps)
    return grads


def check_grad_against_fd(fn, x: torch.Tensor, n_coords: int = 5, seed: int = 0,
                          eps: float = 1e-5, rel_tol: float = 1e-3, min_scale: float = 1e-6,
                          coords: str = "random"):
    """Assert reverse-mode gradient of fn matches central differences at a
    coordinate subset. ``x`` should be float64 for a 1e-3 rel check.

    ``coords="top"`` probes the largest-magnitude gradient entries instead of
    random ones — useful when most of the input has near-zero gradient and FD
    truncation noise would dominate the relative error.
    """
    rng = np.random.default_rng(seed)
    x = x.detach().clone().requires_grad_(True)
    y = fn(x)
    y.backward()
    grad = x.grad.reshape(-1)
    n = min(n_coords, x.numel())
    if coords == "top":
        coords = np.argsort(grad.abs().numpy())[::-1][:n].copy()
    else:
        coords = rng.choice(x.numel(), size=n, replace=False)
    fd = finite_difference_grad(lambda t: fn(t.detach()), x, coords, eps=eps)
    for c, fd_val in fd.items():
        an_val = float(grad[c])
        scale = max(abs(fd_val), abs(an_val), min_scale)
        assert abs(an_val - fd_val) / scale <= rel_tol, (
            f"grad mismatch at coord {c}: analytic {an_val} vs fd {fd_val}"
        )
