"""Latency measurement with observed worst-case reporting.

A benchmark runs unrecorded warmups, then times each iteration of the
subject with the monotonic wall clock. Every raw sample is kept so the
summary statistics (mean, standard deviation, min, OWCET = observed
worst-case execution time = max) can always be recomputed and dispersion
plots regenerated. Absolute times are machine-bound and never asserted;
comparisons between reports use relative deltas.
"""

import csv
import json
import statistics
import time
from dataclasses import dataclass, field


@dataclass(frozen=True)
class BenchReport:
    subject: str
    samples_ns: tuple            # one entry per recorded iteration
    warmup: int
    mean_ns: float
    std_ns: float
    min_ns: int
    owcet_ns: int                # max observed latency
    reference_note: str = ""     # optional external context, informational only

    def __post_init__(self):
        if not self.samples_ns:
            raise ValueError("a bench report needs at least one sample")
        if not self.owcet_ns >= self.mean_ns >= self.min_ns:
            raise ValueError(
                f"inconsistent stats: owcet {self.owcet_ns} >= mean"
                f" {self.mean_ns} >= min {self.min_ns} must hold")

    @classmethod
    def from_samples(cls, subject: str, samples_ns, warmup: int = 0,
                     reference_note: str = "") -> "BenchReport":
        samples = tuple(int(s) for s in samples_ns)
        return cls(
            subject=subject, samples_ns=samples, warmup=warmup,
            mean_ns=statistics.fmean(samples),
            std_ns=statistics.pstdev(samples) if len(samples) > 1 else 0.0,
            min_ns=min(samples), owcet_ns=max(samples),
            reference_note=reference_note)

    def as_dict(self) -> dict:
        return {
            "subject": self.subject,
            "iterations": len(self.samples_ns),
            "warmup": self.warmup,
            "mean_ns": self.mean_ns,
            "std_ns": self.std_ns,
            "min_ns": self.min_ns,
            "owcet_ns": self.owcet_ns,
            "reference_note": self.reference_note,
            "samples_ns": list(self.samples_ns),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        obj = json.loads(text)
        return cls.from_samples(obj["subject"], obj["samples_ns"],
                                warmup=obj.get("warmup", 0),
                                reference_note=obj.get("reference_note", ""))


def run_bench(fn, subject: str, warmup: int = 3, iterations: int = 30,
              reference_note: str = "") -> BenchReport:
    """Time ``fn()`` after warmups; results are discarded, never inspected."""
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iterations):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return BenchReport.from_samples(subject, samples, warmup=warmup,
                                    reference_note=reference_note)


def improvement_pct(baseline: float, candidate: float) -> float:
    """Latency drop of candidate vs baseline, in percent (positive = faster)."""
    if baseline <= 0:
        raise ValueError("baseline latency must be positive")
    return (baseline - candidate) / baseline * 100.0


def compare(baseline: BenchReport, candidate: BenchReport,
            require_same_subject: bool = False) -> dict:
    """Relative deltas between two reports of the same subject semantics."""
    mismatched = baseline.subject != candidate.subject
    if mismatched and require_same_subject:
        raise ValueError(
            f"cannot compare {baseline.subject!r} with {candidate.subject!r}")
    return {
        "baseline": baseline.subject,
        "candidate": candidate.subject,
        "subject_mismatch": mismatched,
        "mean_improvement_pct": improvement_pct(baseline.mean_ns,
                                                candidate.mean_ns),
        "owcet_improvement_pct": improvement_pct(baseline.owcet_ns,
                                                 candidate.owcet_ns),
        "dispersion_improvement_pct": (
            improvement_pct(baseline.std_ns, candidate.std_ns)
            if baseline.std_ns > 0 else None),
    }


def write_csv(report: BenchReport, stream) -> None:
    writer = csv.writer(stream)
    writer.writerow(["subject", "iteration", "latency_ns"])
    for i, ns in enumerate(report.samples_ns):
        writer.writerow([report.subject, i, ns])
