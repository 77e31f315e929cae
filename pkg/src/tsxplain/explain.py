"""Salient regions, temporal pattern labels, template sentences and Markdown reports."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from datetime import datetime
from importlib import resources
from typing import Protocol, Sequence

import numpy as np

from .fusion import SalientRegion, threshold_regions
from .saliency import Heatmap

MAX_REGIONS = 5
SLOPE_MIN = 0.01
POINTWISE_MAX_WIDTH = 2
MIN_OVERLAP = 0.5
KINDS = ("pointwise_anomaly", "interval_trend", "cross_channel_correlation")
DIRECTIONS = ("rising", "falling", "flat", "spike")
NO_REGIONS = "No salient regions above threshold."

_SLOT = re.compile(r"\[([^\[\]]+)\]")


class TemplateError(ValueError):
    pass


@dataclass
class PatternDescriptor:
    kind: str
    direction: str
    strength: float = 1.0
    linked_regions: list[int] = field(default_factory=list)
    slope: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if not 0.0 <= self.strength <= 1.0:
            raise ValueError("strength must lie in [0, 1]")
        if self.kind == "cross_channel_correlation" and len(self.linked_regions) < 2:
            raise ValueError("a correlation links at least two regions")

    @property
    def key(self) -> str:
        return f"{self.kind}/{self.direction}"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "direction": self.direction,
            "strength": self.strength,
            "linked_regions": list(self.linked_regions),
            "slope": self.slope,
        }


@dataclass
class Template:
    id: str
    domain: str
    text: str
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.domain not in ("clinical", "industrial", "generic"):
            raise ValueError(f"unknown template domain {self.domain!r}")
        unbound = [s for s in self.slot_names() if s not in self.slots]
        if unbound:
            raise TemplateError(f"template {self.id} has slots without binding rules: {unbound}")

    def slot_names(self) -> list[str]:
        return _SLOT.findall(self.text)


def _load_json(name: str):
    return json.loads(resources.files("tsxplain").joinpath("data").joinpath(name).read_text(encoding="utf-8"))


def load_templates(path=None) -> dict[str, Template]:
    raw = json.loads(open(path, encoding="utf-8").read()) if path else _load_json("templates.json")
    return {t["id"]: Template(**t) for t in raw}


def load_implications(path=None) -> dict[str, dict[str, str]]:
    return json.loads(open(path, encoding="utf-8").read()) if path else _load_json("implications.json")


def load_pattern_words() -> dict[str, str]:
    return _load_json("pattern_words.json")


def default_template(domain: str = "generic") -> Template:
    return load_templates()[f"{domain}-detected"]


# ---------------------------------------------------------------------------
# Regions and patterns
# ---------------------------------------------------------------------------


def identify_regions(h: Heatmap, names: Sequence[str] | None = None, q: float = 0.2,
                     timestamps: Sequence[str] | None = None, max_regions: int = MAX_REGIONS) -> list[SalientRegion]:
    """Threshold the fused map and keep the strongest ``max_regions`` runs."""
    names = list(names) if names is not None else h.channel_names
    if names is not None and len(names) != h.shape[1]:
        raise ValueError(f"{len(names)} channel names for {h.shape[1]} heatmap channels")
    if timestamps is not None and len(timestamps) != h.shape[0]:
        raise ValueError("timestamps length does not match heatmap length")
    h = h.with_values(h.values, channel_names=names, timestamps=list(timestamps) if timestamps else h.timestamps)
    regions = threshold_regions(h, q)
    regions.sort(key=lambda r: (-r.peak_value, r.channel, r.t_start))
    return regions[:max_regions]


def fit_slope(segment: np.ndarray) -> float:
    if len(segment) < 2:
        return 0.0
    t = np.arange(len(segment), dtype=np.float64)
    return float(np.polyfit(t, segment, 1)[0])


def overlap_fraction(a: SalientRegion, b: SalientRegion) -> float:
    """Overlap length over the shorter region's width."""
    inter = min(a.t_end, b.t_end) - max(a.t_start, b.t_start) + 1
    return max(inter, 0) / min(a.width, b.width)


def classify_pattern(region: SalientRegion, raw_signal: np.ndarray, all_regions: Sequence[SalientRegion] = (),
                     slope_min: float = SLOPE_MIN) -> PatternDescriptor:
    """Width rule first (pointwise wins over trend), then the sign of the fitted slope.

    Overlapping regions on other channels are listed in ``linked_regions``;
    the correlation descriptors themselves come from :func:`find_correlations`.
    """
    links = [i for i, other in enumerate(all_regions)
             if other.channel != region.channel and overlap_fraction(region, other) >= MIN_OVERLAP]
    if region.width <= POINTWISE_MAX_WIDTH:
        return PatternDescriptor("pointwise_anomaly", "spike", 1.0, links)
    seg = np.asarray(raw_signal, dtype=np.float64)[region.t_start : region.t_end + 1, region.channel]
    slope = fit_slope(seg)
    if abs(slope) <= slope_min:
        direction = "flat"
    else:
        direction = "rising" if slope > 0 else "falling"
    return PatternDescriptor("interval_trend", direction, 1.0, links, slope)


def find_correlations(regions: Sequence[SalientRegion]) -> list[PatternDescriptor]:
    """Pair regions on different channels whose overlap is at least half the shorter one."""
    out = []
    for i in range(len(regions)):
        for j in range(i + 1, len(regions)):
            a, b = regions[i], regions[j]
            if a.channel == b.channel:
                continue
            frac = overlap_fraction(a, b)
            if frac >= MIN_OVERLAP:
                out.append(PatternDescriptor("cross_channel_correlation", "flat", float(frac), [i, j]))
    return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _clock(ts: str) -> str:
    try:
        return datetime.fromisoformat(ts).strftime("%H:%M")
    except ValueError:
        return ts


def time_bounds(region: SalientRegion) -> tuple[str, str]:
    """("timestep 12", "18") for index time, ("02:10", "02:40") for clock time."""
    if region.timestamps:
        return _clock(region.timestamps[0]), _clock(region.timestamps[1])
    return f"timestep {region.t_start}", str(region.t_end)


def render_template(descriptor: PatternDescriptor, region: SalientRegion, template: Template | None = None,
                    implications: dict | None = None, pattern_words: dict | None = None) -> str:
    template = template or default_template()
    implications = load_implications() if implications is None else implications
    pattern_words = load_pattern_words() if pattern_words is None else pattern_words
    start, end = time_bounds(region)
    values = {
        "variable": region.channel_name if region.channel_name is not None else f"channel {region.channel}",
        "start time": start,
        "end time": end,
        "pattern": pattern_words.get(descriptor.key),
        "implication": implications.get(template.domain, {}).get(descriptor.key),
    }
    missing = [s for s in template.slot_names() if values.get(s) is None]
    if missing:
        raise TemplateError("cannot bind slot(s) " + ", ".join(f"[{s}]" for s in missing)
                            + f" for {descriptor.key} in domain {template.domain}")
    return _SLOT.sub(lambda m: values[m.group(1)], template.text)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


class TextClient(Protocol):
    """Pluggable text generator: one call, prompt in, paragraph out."""

    def generate(self, prompt: str, timeout: float) -> str: ...


class StubClient:
    """Deterministic client that answers with a digest of the prompt."""

    def generate(self, prompt: str, timeout: float) -> str:
        return f"prompt digest {prompt_digest(prompt)}"


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


@dataclass
class ExplanationReport:
    sample_id: int | str
    prediction: dict
    regions: list[SalientRegion]
    descriptors: list[PatternDescriptor]
    correlations: list[PatternDescriptor]
    sentences: list[str]
    summary: str
    mode: str = "template"
    low_variance: list[tuple[str, float]] = field(default_factory=list)
    notice: str | None = None
    metrics: dict | None = None

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "prediction": self.prediction,
            "regions": [r.to_dict() for r in self.regions],
            "descriptors": [d.to_dict() for d in self.descriptors],
            "correlations": [d.to_dict() for d in self.correlations],
            "sentences": self.sentences,
            "summary": self.summary,
            "mode": self.mode,
            "low_variance": [[n, s] for n, s in self.low_variance],
            "notice": self.notice,
            "metrics": self.metrics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _cell(text) -> str:
    return str(text).replace("|", "\\|")


def build_prompt(report: ExplanationReport) -> str:
    """Structured prompt for an external client; format documented in the README."""
    return json.dumps({
        "task": "Summarise the model's evidence for this prediction in one paragraph.",
        "prediction": report.prediction,
        "regions": [r.to_dict() for r in report.regions],
        "patterns": [d.to_dict() for d in report.descriptors],
        "sentences": report.sentences,
    }, sort_keys=True)


def template_summary(regions, correlations) -> str:
    if not regions:
        return NO_REGIONS
    names = [r.channel_name or f"channel {r.channel}" for r in regions]
    text = f"The explanation rests on {len(regions)} region(s); the strongest is on {names[0]}."
    for d in correlations:
        a, b = d.linked_regions[:2]
        text += f" Regions on {names[a]} and {names[b]} overlap ({d.strength:.0%})."
    return text


def generate_report(sample_id, prediction: dict, heatmap: Heatmap, raw_signal: np.ndarray,
                    regions: Sequence[SalientRegion] | None = None, mode: str = "template",
                    client: TextClient | None = None, timeout: float = 10.0, template: Template | None = None,
                    low_variance: Sequence[tuple[str, float]] = (), q: float = 0.2) -> tuple[ExplanationReport, str]:
    """Assemble the report and its Markdown rendering."""
    if mode not in ("template", "external_client"):
        raise ValueError(f"unknown generation mode {mode!r}")
    if regions is None:
        regions = identify_regions(heatmap, q=q)
    regions = list(regions)
    T = np.asarray(raw_signal).shape[0]
    if any(r.t_start < 0 or r.t_end >= T for r in regions):
        raise ValueError("region outside the sample's time range")
    descriptors = [classify_pattern(r, raw_signal, regions) for r in regions]
    correlations = find_correlations(regions)
    template = template or default_template()
    implications, words = load_implications(), load_pattern_words()
    sentences = [render_template(d, r, template, implications, words) for d, r in zip(descriptors, regions)]
    report = ExplanationReport(
        sample_id=sample_id,
        prediction=dict(prediction),
        regions=regions,
        descriptors=descriptors,
        correlations=correlations,
        sentences=sentences,
        summary=template_summary(regions, correlations),
        low_variance=list(low_variance),
    )
    if mode == "external_client":
        if client is None:
            report.notice = "No text client configured; template summary used."
        else:
            try:
                report.summary = client.generate(build_prompt(report), timeout).strip()
                report.mode = "external_client"
            except Exception as exc:  # any client failure degrades to template mode
                report.notice = f"Text client failed ({type(exc).__name__}); template summary used."
    return report, render_markdown(report)


def render_markdown(report: ExplanationReport) -> str:
    lines = [f"# Explanation report: sample {report.sample_id}", "", "## Prediction", ""]
    for k, v in report.prediction.items():
        lines.append(f"- **{k}**: {v}")
    lines += ["", "## Top regions", ""]
    if report.regions:
        lines += ["| # | Channel | Start | End | Peak | Pattern |", "|---|---|---|---|---|---|"]
        for i, (r, d) in enumerate(zip(report.regions, report.descriptors), 1):
            start, end = time_bounds(r)
            name = r.channel_name or f"channel {r.channel}"
            lines.append(f"| {i} | {_cell(name)} | {_cell(start)} | {_cell(end)} | {r.peak_value:.3f} | {d.key} |")
    else:
        lines.append(NO_REGIONS)
    lines += ["", "## Explanations", ""]
    lines += [f"- {s}" for s in report.sentences] or [NO_REGIONS]
    lines += ["", "## Summary", ""]
    if report.notice:
        lines += [f"> {report.notice}", ""]
    lines.append(report.summary)
    lines += ["", "## Pruning recommendations", ""]
    if report.low_variance:
        lines.append("Channels below the variance-share threshold are candidates for removal:")
        lines.append("")
        lines += [f"- {name}: {share:.4%} of total variance" for name, share in report.low_variance]
    else:
        lines.append("No low-variance channels flagged.")
    return "\n".join(lines) + "\n"


def variance_shares(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    var = X.reshape(-1, X.shape[-1]).var(axis=0)
    total = var.sum()
    if total == 0:
        return np.full(len(var), 1.0 / len(var))
    return var / total


def flag_low_variance_channels(bundle, variance_threshold: float = 0.01) -> list[tuple[str, float]]:
    """(name, share) for channels whose share of total variance is below the threshold, ascending."""
    X = bundle.X if hasattr(bundle, "X") else np.asarray(bundle)
    names = getattr(bundle, "channel_names", None) or [f"channel {c}" for c in range(X.shape[-1])]
    shares = variance_shares(X)
    flagged = [(names[c], float(shares[c])) for c in range(len(shares)) if shares[c] < variance_threshold]
    return sorted(flagged, key=lambda x: (x[1], x[0]))
