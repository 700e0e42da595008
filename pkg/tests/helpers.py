"""Small in-memory datasets shared by the unit tests."""
import numpy as np

from trajdistill.data import FeatureDataset
from trajdistill.models import ArchSpec

TINY_SHAPE = (16, 8)


def tiny_dataset(per_speaker=4, k=3, speakers=6, seed=0, shape=TINY_SHAPE) -> FeatureDataset:
    """Class c lights up a band of rows; speakers are split 2/2/2 over train/val/test."""
    rng = np.random.default_rng(seed)
    xs, ys, spk, splits = [], [], [], []
    band = shape[0] // k
    for s in range(speakers):
        split = ("train", "val", "test")[s % 3]
        for c in range(k):
            for _ in range(per_speaker):
                x = rng.standard_normal(shape) * 0.5
                x[c * band : (c + 1) * band] += 2.0
                xs.append(x)
                ys.append(c)
                spk.append(f"s{s}")
                splits.append(split)
    classes = tuple(f"c{c}" for c in range(k))
    ids = tuple(f"clip{n}" for n in range(len(xs)))
    return FeatureDataset(np.stack(xs).astype(np.float32), np.array(ys), tuple(spk), tuple(splits), classes, ids)


def tiny_spec(k=3, name="cnn4_tiny") -> ArchSpec:
    return ArchSpec(name, TINY_SHAPE, k)


# criterion number -> "PASS ..." / "FAIL ..." line, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    assert ok, line


def kink_free_central_diff(f, x: float, rel_steps=(1e-3, 1e-4, 1e-5, 1e-6)) -> tuple[float, float]:
    """Central difference of scalar f at x, using the largest step whose bracket holds no kink.

    relu and max-pool make the unrolled loss piecewise smooth, and a step
    that straddles a kink gives a meaningless slope.  A bracket counts as
    smooth when its forward and backward one-sided slopes agree to 1e-3.
    Returns (slope, step).
    """
    f0 = f(x)
    for r in rel_steps:
        h = r * abs(x)
        up, dn = f(x + h), f(x - h)
        fwd, bwd = (up - f0) / h, (f0 - dn) / h
        if abs(fwd - bwd) <= 1e-3 * max(abs(fwd), abs(bwd), 1e-12):
            return (up - dn) / (2 * h), h
    return (up - dn) / (2 * h), h
