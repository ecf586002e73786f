"""Fast verification battery behind ``hybridad selfcheck``.

Each check returns ``(passed, detail)``.  Gradient cases are shared with the
test suite through :data:`GRAD_CASES`: a builder takes a Generator and returns
``(scalar_fn, tensors_to_check)``.
"""

from __future__ import annotations

import tempfile
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SPLIT_RATIOS, extract_slices, stratified_split_indices
from .ensemble import Prediction, fuse_average
from .layers import MultiHeadAttention
from .metrics import binary_auc, confusion_matrix, precision_recall_f1
from .nifti import DATATYPES, decode_volume, encode_volume

GradCase = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]

OASIS_CLASS_COUNTS = (5002, 488, 67222, 13725)


def _distinct(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    # well separated values keep max-pool argmaxes stable under +/- eps probes
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) / n - 0.5) * 2.0


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.standard_normal(out.shape))
    return lambda y: (y * r).sum()


def _case(make: Callable[[], Tensor], tensors: list[Tensor], rng: np.random.Generator):
    proj = _project(make(), rng)
    return (lambda: proj(make())), tensors


def case_matmul(rng):
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    return _case(lambda: ad.matmul(a, b), [a, b], rng)


def case_conv2d(rng):
    x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    return _case(lambda: ad.conv2d(x, k, b, stride=stride, padding=padding), [x, k, b], rng)


def case_maxpool2d(rng):
    x = Tensor(_distinct(rng, (2, 2, 6, 6)), requires_grad=True)
    return _case(lambda: ad.maxpool2d(x, 2), [x], rng)


def case_batchnorm(rng):
    x = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = Tensor(rng.standard_normal(3), requires_grad=True)

    def make():
        return ad.batchnorm(x, gamma, beta, np.zeros(3), np.ones(3), training=True)
    return _case(make, [x, gamma, beta], rng)


def case_layernorm(rng):
    x = Tensor(rng.standard_normal((2, 3, 6)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True)
    beta = Tensor(rng.standard_normal(6), requires_grad=True)
    return _case(lambda: ad.layernorm(x, gamma, beta), [x, gamma, beta], rng)


def case_softmax(rng):
    x = Tensor(rng.standard_normal((3, 5)) * 2.0, requires_grad=True)
    return _case(lambda: ad.softmax(x), [x], rng)


def case_attention(rng):
    mha = MultiHeadAttention(8, 2, rng)
    x = Tensor(rng.standard_normal((2, 4, 8)), requires_grad=True)
    params = [x, mha.query.weight, mha.key.weight, mha.value.weight, mha.out.weight]
    return _case(lambda: mha(x, training=False, rng=None), params, rng)


def case_cross_entropy(rng):
    from .trainer import cross_entropy_loss

    logits = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    labels = rng.integers(0, 4, size=5)
    return (lambda: cross_entropy_loss(ad.softmax(logits), labels)), [logits]


GRAD_CASES: dict[str, GradCase] = {
    "matmul": case_matmul,
    "conv2d": case_conv2d,
    "maxpool2d": case_maxpool2d,
    "batchnorm": case_batchnorm,
    "layernorm": case_layernorm,
    "softmax": case_softmax,
    "attention": case_attention,
    "cross_entropy": case_cross_entropy,
}

PRIMITIVE_TOL = 1e-5


def grad_check(name: str, seeds: Sequence[int] = range(3), tol: float = PRIMITIVE_TOL):
    worst = 0.0
    for seed in seeds:
        fn, tensors = GRAD_CASES[name](np.random.default_rng(seed))
        worst = max(worst, ad.gradient_check(fn, tensors))
    return worst < tol, f"max rel err {worst:.2e}"


# ---------------------------------------------------------------------------
# non-gradient checks
# ---------------------------------------------------------------------------

def check_metrics_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(8, 60))
        labels = rng.integers(0, 4, n)
        probs = rng.dirichlet(np.ones(4), n)
        preds = [Prediction(p, int(t)) for p, t in zip(probs, labels)]
        cm = confusion_matrix(preds, 4)
        guess = probs.argmax(axis=1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, (_, recall, _) = precision_recall_f1(cm, "weighted")
        if abs(recall - np.mean(guess == labels)) > 1e-12:
            return False, "weighted recall differs from accuracy"
        pos = labels == 0
        if pos.any() and not pos.all():
            s = probs[:, 0]
            wins = (s[pos][:, None] > s[~pos][None, :]).sum()
            ties = (s[pos][:, None] == s[~pos][None, :]).sum()
            brute = (wins + 0.5 * ties) / (pos.sum() * (~pos).sum())
            if abs(binary_auc(s, pos) - brute) > 1e-12:
                return False, "rank AUC differs from pairwise count"
    return True, "20 random prediction sets"


def check_split_arithmetic():
    labels = np.repeat(np.arange(4), OASIS_CLASS_COUNTS)
    parts = stratified_split_indices(labels, SPLIT_RATIOS, seed=0)
    sizes = [p.size for p in parts]
    again = stratified_split_indices(labels, SPLIT_RATIOS, seed=0)
    same = all(np.array_equal(a, b) for a, b in zip(parts, again))
    ok = same and abs(sizes[0] - 60505) <= 2 and all(abs(s - 12966) <= 2 for s in sizes[1:])
    return ok, "/".join(map(str, sizes))


def check_slice_count():
    from .nifti import Volume, VolumeHeader

    header = VolumeHeader(dims=(3, 2, 2, 256, 1, 1, 1, 1), datatype_code=16, bitpix=32,
                          vox_offset=352)
    volume = Volume(header, np.zeros((2, 2, 256)))
    n = len(extract_slices(volume))
    return n == 61 and n * 1417 == sum(OASIS_CLASS_COUNTS), f"{n} slices per volume"


def check_nifti_roundtrip():
    rng = np.random.default_rng(0)
    for code, (char, _) in DATATYPES.items():
        dtype = np.dtype(char)
        info = np.iinfo(dtype) if np.dtype(dtype).kind in "iu" else None
        if info is not None:
            arr = rng.integers(info.min, info.max, size=(4, 3, 5), endpoint=True).astype(dtype)
        else:
            arr = rng.standard_normal((4, 3, 5)).astype(dtype)
        for endian in "<>":
            vol = decode_volume(encode_volume(arr, endian=endian))
            if vol.raw.dtype.newbyteorder("=") != dtype or not np.array_equal(vol.raw, arr):
                return False, f"datatype {code} ({endian}) changed on round trip"
    return True, f"{len(DATATYPES)} datatypes x 2 byte orders"


def check_checkpoint_roundtrip():
    from .models import ModelConfig, build_model
    from .trainer import load_checkpoint, save_checkpoint

    cfg = ModelConfig(family="custom_cnn", input_size=(16, 16, 3), widths=(4, 4, 4, 4), seed=3)
    model = build_model(cfg)
    x = np.random.default_rng(1).standard_normal((2, 3, 16, 16))
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(model, None, Path(tmp) / "m.bin")
        restored, _ = load_checkpoint(path)
    with ad.no_grad():
        same = np.array_equal(model.forward(x).data, restored.forward(x).data)
    return same, "forward outputs bit-identical" if same else "forward outputs differ"


def check_fusion_identity():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(4), 50)
    fused = fuse_average([p, p, p], [0.2, 0.3, 0.5])
    return np.array_equal(fused, p), "identical members fuse to the member"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    **{f"grad:{name}": (lambda name=name: grad_check(name)) for name in GRAD_CASES},
    "metrics:oracle": check_metrics_oracle,
    "split:oasis_counts": check_split_arithmetic,
    "slices:z_window": check_slice_count,
    "nifti:roundtrip": check_nifti_roundtrip,
    "checkpoint:roundtrip": check_checkpoint_roundtrip,
    "ensemble:identity": check_fusion_identity,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def run_checks(inject_faults: Sequence[str] = ()) -> list[CheckResult]:
    """Run every registered check once; ``inject_faults`` corrupts named backward rules."""
    unknown = set(inject_faults) - {"conv2d"}
    if unknown:
        from .errors import ConfigError
        raise ConfigError(f"no fault hook for {sorted(unknown)}; available: conv2d")
    ad._GRAD_FAULTS.update(inject_faults)
    results = []
    try:
        for name, check in CHECKS.items():
            t0 = time.perf_counter()
            try:
                passed, detail = check()
            except Exception as exc:  # a crashing check is a failing check
                passed, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - t0))
    finally:
        ad._GRAD_FAULTS.difference_update(inject_faults)
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  status  time    detail"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {status:<6}  {r.seconds:5.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} passed"
                 + (f"; failed: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines) + "\n"
