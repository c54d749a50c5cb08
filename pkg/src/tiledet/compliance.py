"""Machine-checkable operating-domain constraints over a labeled corpus.

Each check turns one image-level constraint into a pass/fail statistic with
the offending samples named on failure: object sizes inside a declared range
(with a quantile rule for the small-object mass), object positions uniform
over the frame (chi-square over a k x k grid), mean image brightness inside
a range, spectral energy concentrated at long wavelengths, and object counts
per image covering a declared span. The report also carries the conditions
that stay manual review items because no image statistic captures them.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

PASS = "pass"
FAIL = "fail"
INDETERMINATE = "indeterminate"

# conditions the automated checks cannot see; kept visible in every report
DEFAULT_MANUAL_CONDITIONS = (
    "object painted to match the background (camouflage)",
    "distant manned aircraft resembling a small UAV",
)


@dataclass(frozen=True)
class OddConstraints:
    size_outer: tuple = (20, 400)      # allowed max-side range, px
    size_inner: tuple = (20, 100)      # the quantile must land in here
    size_quantile: float = 0.95
    grid: int = 8                      # position-uniformity bins per axis
    alpha: float = 0.01
    brightness: tuple = (0.05, 0.95)   # allowed mean-V range
    min_wavelength: float = 20.0       # px
    min_energy_fraction: float = 0.8
    count_range: tuple = (0, 4)
    manual_conditions: tuple = DEFAULT_MANUAL_CONDITIONS

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        for name, rng in (("size_outer", self.size_outer),
                          ("size_inner", self.size_inner),
                          ("brightness", self.brightness),
                          ("count_range", self.count_range)):
            if rng[0] > rng[1]:
                raise ValueError(f"{name} range is empty: {rng}")

    @classmethod
    def from_json_obj(cls, obj: dict) -> "OddConstraints":
        kwargs = {}
        size = obj.get("object_size", {})
        if "outer" in size:
            kwargs["size_outer"] = tuple(size["outer"])
        if "inner" in size:
            kwargs["size_inner"] = tuple(size["inner"])
        if "quantile" in size:
            kwargs["size_quantile"] = size["quantile"]
        pos = obj.get("position_uniformity", {})
        if "grid" in pos:
            kwargs["grid"] = pos["grid"]
        if "alpha" in pos:
            kwargs["alpha"] = pos["alpha"]
        if "brightness" in obj and "range" in obj["brightness"]:
            kwargs["brightness"] = tuple(obj["brightness"]["range"])
        freq = obj.get("spatial_frequency", {})
        if "min_wavelength" in freq:
            kwargs["min_wavelength"] = freq["min_wavelength"]
        if "min_energy_fraction" in freq:
            kwargs["min_energy_fraction"] = freq["min_energy_fraction"]
        if "object_count" in obj and "range" in obj["object_count"]:
            kwargs["count_range"] = tuple(obj["object_count"]["range"])
        if "manual_conditions" in obj:
            kwargs["manual_conditions"] = tuple(obj["manual_conditions"])
        return cls(**kwargs)


@dataclass
class ConstraintResult:
    name: str
    status: str
    statistic: float | None = None
    threshold: float | None = None
    sample_count: int = 0
    offenders: list = field(default_factory=list)
    detail: str = ""

    def as_dict(self) -> dict:
        return {"name": self.name, "status": self.status,
                "statistic": self.statistic, "threshold": self.threshold,
                "sample_count": self.sample_count,
                "offenders": self.offenders[:20], "detail": self.detail}


def object_size(box) -> int:
    """Object size as the longer bounding-box side, in px."""
    return max(box.w, box.h)


def check_sizes(corpus, constraints: OddConstraints) -> ConstraintResult:
    sizes = []
    offenders = []
    lo, hi = constraints.size_outer
    for item in corpus:
        for b in item.boxes:
            s = object_size(b)
            sizes.append(s)
            if not lo <= s <= hi:
                offenders.append(f"{item.name}: size {s} outside [{lo}, {hi}]")
    if not sizes:
        return ConstraintResult("object_size", INDETERMINATE,
                                detail="corpus has no labeled objects")
    q = float(np.quantile(sizes, constraints.size_quantile))
    ilo, ihi = constraints.size_inner
    status = PASS if not offenders and ilo <= q <= ihi else FAIL
    detail = (f"size = max(w, h) px; {constraints.size_quantile:.0%} quantile"
              f" {q:.1f} must lie in [{ilo}, {ihi}]")
    if status == FAIL and not offenders:
        offenders.append(f"quantile {q:.1f} outside [{ilo}, {ihi}]")
    return ConstraintResult("object_size", status, statistic=q,
                            threshold=float(ihi), sample_count=len(sizes),
                            offenders=offenders, detail=detail)


def position_histogram(corpus, grid: int):
    """k x k counts of normalized object centers, plus the sample count."""
    counts = np.zeros((grid, grid), dtype=np.int64)
    n = 0
    for item in corpus:
        for b in item.boxes:
            cx, cy = b.center
            gx = min(int(cx / item.width * grid), grid - 1)
            gy = min(int(cy / item.height * grid), grid - 1)
            counts[gy, gx] += 1
            n += 1
    return counts, n


def chi_square_uniform(counts: np.ndarray, expected: np.ndarray | None = None) -> float:
    observed = counts.astype(np.float64).ravel()
    if expected is None:
        expected = np.full_like(observed, observed.sum() / observed.size)
    else:
        expected = np.asarray(expected, dtype=np.float64).ravel()
    return float(((observed - expected) ** 2 / expected).sum())


def chi_square_critical(cells: int, alpha: float) -> float:
    return float(chi2.ppf(1.0 - alpha, df=cells - 1))


def check_position_uniformity(corpus, constraints: OddConstraints) -> ConstraintResult:
    k = constraints.grid
    counts, n = position_histogram(corpus, k)
    needed = 10 * k * k
    if n < needed:
        return ConstraintResult(
            "position_uniformity", INDETERMINATE, sample_count=n,
            detail=f"needs at least {needed} labeled objects, got {n}")
    stat = chi_square_uniform(counts)
    crit = chi_square_critical(k * k, constraints.alpha)
    status = PASS if stat < crit else FAIL
    offenders = []
    if status == FAIL:
        hot = np.unravel_index(np.argmax(counts), counts.shape)
        offenders.append(
            f"grid cell (row {hot[0]}, col {hot[1]}) holds {counts[hot]} of"
            f" {n} centers")
    return ConstraintResult(
        "position_uniformity", status, statistic=stat, threshold=crit,
        sample_count=n, offenders=offenders,
        detail=f"chi-square over a {k}x{k} grid at alpha={constraints.alpha}")


def mean_brightness(image: np.ndarray) -> float:
    """Mean HSV value channel: per-pixel max(R, G, B) / 255."""
    return float(image.max(axis=2).mean() / 255.0)


def check_brightness(corpus, constraints: OddConstraints) -> ConstraintResult:
    lo, hi = constraints.brightness
    offenders = []
    values = []
    for item in corpus:
        v = mean_brightness(item.image)
        values.append(v)
        if not lo <= v <= hi:
            offenders.append(f"{item.name}: mean V {v:.3f} outside [{lo}, {hi}]")
    if not values:
        return ConstraintResult("brightness", INDETERMINATE,
                                detail="corpus is empty")
    status = PASS if not offenders else FAIL
    return ConstraintResult(
        "brightness", status, statistic=float(np.mean(values)),
        threshold=float(hi), sample_count=len(values), offenders=offenders,
        detail=f"per-image mean V must stay in [{lo}, {hi}]")


def long_wavelength_energy_fraction(image: np.ndarray,
                                    min_wavelength: float) -> float:
    """Fraction of non-DC spectral energy at wavelengths >= the cutoff.

    A constant image has no non-DC energy and counts as fraction 1.
    """
    gray = image.astype(np.float64).mean(axis=2)
    spectrum = np.abs(np.fft.fft2(gray)) ** 2
    h, w = gray.shape
    fy = np.minimum(np.arange(h), h - np.arange(h)) / h
    fx = np.minimum(np.arange(w), w - np.arange(w)) / w
    freq = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    dc = spectrum[0, 0]
    spectrum[0, 0] = 0.0
    total = spectrum.sum()
    # (near-)constant image: everything at DC up to fft rounding noise
    if total <= max(dc, 1.0) * 1e-12:
        return 1.0
    low = spectrum[freq <= 1.0 / min_wavelength].sum()
    return float(low / total)


def check_spatial_frequency(corpus, constraints: OddConstraints) -> ConstraintResult:
    offenders = []
    fractions = []
    for item in corpus:
        frac = long_wavelength_energy_fraction(item.image,
                                               constraints.min_wavelength)
        fractions.append(frac)
        if frac < constraints.min_energy_fraction:
            offenders.append(
                f"{item.name}: only {frac:.2f} of spectral energy above"
                f" {constraints.min_wavelength} px wavelengths")
    if not fractions:
        return ConstraintResult("spatial_frequency", INDETERMINATE,
                                detail="corpus is empty")
    status = PASS if not offenders else FAIL
    return ConstraintResult(
        "spatial_frequency", status, statistic=float(np.min(fractions)),
        threshold=constraints.min_energy_fraction, sample_count=len(fractions),
        offenders=offenders,
        detail=f"energy fraction at wavelengths >= {constraints.min_wavelength}"
               f" px must be >= {constraints.min_energy_fraction}")


def check_object_count(corpus, constraints: OddConstraints) -> ConstraintResult:
    lo, hi = constraints.count_range
    offenders = []
    seen = set()
    n = 0
    for item in corpus:
        count = len(item.boxes)
        seen.add(count)
        n += 1
        if not lo <= count <= hi:
            offenders.append(f"{item.name}: {count} objects outside [{lo}, {hi}]")
    if n == 0:
        return ConstraintResult("object_count", INDETERMINATE,
                                detail="corpus is empty")
    missing = [c for c in range(lo, hi + 1) if c not in seen]
    if missing:
        offenders.append(f"no image carries {missing} objects")
    status = PASS if not offenders else FAIL
    return ConstraintResult(
        "object_count", status, statistic=float(len(seen)),
        threshold=float(hi - lo + 1), sample_count=n, offenders=offenders,
        detail=f"every image within [{lo}, {hi}] objects and every count"
               f" represented")


@dataclass
class ComplianceReport:
    constraints: list
    heatmap: list
    size_histogram: dict
    verdict: str
    manual_conditions: list

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "constraints": [c.as_dict() for c in self.constraints],
            "position_heatmap": self.heatmap,
            "size_histogram": self.size_histogram,
            "manual_conditions": self.manual_conditions,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)


def check_corpus(corpus, constraints: OddConstraints | None = None) -> ComplianceReport:
    """Run every constraint and aggregate the verdict.

    The corpus is materialised once so file ordering cannot influence the
    result and the checks never see a half-consumed iterator.
    """
    constraints = constraints or OddConstraints()
    items = sorted(corpus, key=lambda it: it.name)
    results = [
        check_sizes(items, constraints),
        check_position_uniformity(items, constraints),
        check_brightness(items, constraints),
        check_spatial_frequency(items, constraints),
        check_object_count(items, constraints),
    ]
    if any(r.status == FAIL for r in results):
        verdict = FAIL
    elif any(r.status == INDETERMINATE for r in results):
        verdict = INDETERMINATE
    else:
        verdict = PASS

    counts, _ = position_histogram(items, constraints.grid)
    sizes = [object_size(b) for item in items for b in item.boxes]
    if sizes:
        edges = np.histogram_bin_edges(sizes, bins=16)
        hist, _ = np.histogram(sizes, bins=edges)
        size_hist = {"edges": [float(e) for e in edges],
                     "counts": [int(c) for c in hist]}
    else:
        size_hist = {"edges": [], "counts": []}

    return ComplianceReport(
        constraints=results,
        heatmap=counts.tolist(),
        size_histogram=size_hist,
        verdict=verdict,
        manual_conditions=list(constraints.manual_conditions),
    )


def render_plots(report: ComplianceReport, directory) -> list:
    """Write heat-map and size-histogram PNGs; returns the file paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(np.asarray(report.heatmap), cmap="viridis")
    ax.set_title("object center positions")
    fig.colorbar(im, ax=ax)
    path = directory / "position_heatmap.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(5, 4))
    hist = report.size_histogram
    if hist["counts"]:
        centers = [(hist["edges"][i] + hist["edges"][i + 1]) / 2
                   for i in range(len(hist["counts"]))]
        widths = [hist["edges"][i + 1] - hist["edges"][i]
                  for i in range(len(hist["counts"]))]
        ax.bar(centers, hist["counts"], width=widths, edgecolor="black")
    ax.set_title("object sizes (max side, px)")
    ax.set_xlabel("px")
    path = directory / "size_histogram.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)
    return paths
