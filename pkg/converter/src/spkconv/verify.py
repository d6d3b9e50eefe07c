"""Post-conversion checks: re-read the SPKDS, re-validate every invariant,
and compare the class histogram against the sidecar manifest."""

from __future__ import annotations

from dataclasses import dataclass, field

from spikedelay.datasets import DataFormatError, load_spkds

from .manifest import read_manifest


@dataclass
class VerifyReport:
    path: str
    ok: bool
    num_samples: int = 0
    num_channels: int = 0
    num_classes: int = 0
    per_class_counts: list = field(default_factory=list)
    problems: list = field(default_factory=list)

    def summary(self) -> str:
        status = "pass" if self.ok else "FAIL"
        lines = [f"{self.path}: {status} - {self.num_samples} samples, "
                 f"{self.num_channels} channels, {self.num_classes} classes"]
        lines += [f"  problem: {p}" for p in self.problems]
        return "\n".join(lines)


def verify(path, manifest: bool = True) -> VerifyReport:
    report = VerifyReport(path=str(path), ok=True)
    try:
        ds = load_spkds(path)
        ds.validate()
    except (DataFormatError, OSError, ValueError) as exc:
        report.ok = False
        report.problems.append(str(exc))
        return report
    report.num_samples = len(ds.samples)
    report.num_channels = ds.num_channels
    report.num_classes = ds.num_classes
    counts = [0] * ds.num_classes
    for s in ds.samples:
        counts[s.label] += 1
    report.per_class_counts = counts
    if manifest:
        try:
            doc = read_manifest(path)
        except FileNotFoundError:
            report.ok = False
            report.problems.append("manifest sidecar missing")
            return report
        for key, got in (("num_samples", len(ds.samples)),
                         ("num_channels", ds.num_channels),
                         ("num_classes", ds.num_classes),
                         ("delta_t_us", ds.delta_t_us),
                         ("per_class_counts", counts)):
            want = doc.get(key)
            if want != got:
                report.ok = False
                report.problems.append(f"manifest {key}={want} but file has {got}")
    return report
