"""Synthetic paired corpus: six parametric source families, keyword and
caption query pools, and the mixing protocol (2-4 components for keyword
examples, exactly 2 for captions; target/non-target energy ratio uniform
in [-20, +20] dB; the two pools are never cross-mixed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import Waveform, write_wav

# (family, bin) -> (keyword, caption noun phrase)
SOURCE_BINS: list[tuple[str, str, str, str]] = [
    ("sine", "low", "low sine", "a low steady tone"),
    ("sine", "high", "high sine", "a high piercing tone"),
    ("harmonic_stack", "warm", "warm harmonics", "a warm organ-like hum"),
    ("harmonic_stack", "bright", "bright harmonics", "a bright buzzing drone"),
    ("chirp", "rising", "rising chirp", "a rising whistle"),
    ("chirp", "falling", "falling chirp", "a falling whistle"),
    ("band_noise", "low", "low noise", "a low rumbling noise"),
    ("band_noise", "high", "high noise", "a high hissing noise"),
    ("am_tone", "slow", "slow pulsing tone", "a slowly pulsing tone"),
    ("am_tone", "fast", "fast pulsing tone", "a rapidly fluttering tone"),
    ("click_train", "sparse", "sparse clicks", "a slow ticking of clicks"),
    ("click_train", "dense", "dense clicks", "a dense rattle of clicks"),
]

CAPTION_TEMPLATES = [
    "{target} over {other}",
    "{target} mixed with {other}",
    "{target} under {other}",
    "{target} alongside {other}",
]

_TARGET_RMS = 0.05
_PEAK_LIMIT = 0.99


@dataclass
class SourceSpec:
    family: str
    bin_name: str
    keyword: str
    caption_phrase: str
    params: dict


@dataclass
class MixtureExample:
    mixture: Waveform
    target: Waveform
    query: str
    query_kind: str  # "keyword" or "caption"
    snr_db: float
    component_keywords: list[str]  # target keyword first
    interferers: list[Waveform] = field(default_factory=list)
    pool: str = "keyword"
    example_id: str = ""


def format_keyword_query(keywords: list[str]) -> str:
    """Join keywords as in multi-label queries: "a", "a and b",
    "a, b and c"."""
    if not keywords:
        raise ValueError("need at least one keyword")
    if len(keywords) == 1:
        return keywords[0]
    return ", ".join(keywords[:-1]) + " and " + keywords[-1]


def _sample_params(family: str, bin_name: str, rng: np.random.Generator) -> dict:
    if family == "sine":
        lo, hi = (150.0, 300.0) if bin_name == "low" else (1000.0, 2000.0)
        return {"freq": rng.uniform(lo, hi), "phase": rng.uniform(0, 2 * np.pi)}
    if family == "harmonic_stack":
        lo, hi = (100.0, 200.0) if bin_name == "warm" else (300.0, 500.0)
        return {"f0": rng.uniform(lo, hi), "phase": rng.uniform(0, 2 * np.pi),
                "harmonics": 5}
    if family == "chirp":
        if bin_name == "rising":
            f0, f1 = rng.uniform(200.0, 400.0), rng.uniform(2000.0, 3500.0)
        else:
            f0, f1 = rng.uniform(2000.0, 3500.0), rng.uniform(200.0, 400.0)
        return {"f0": f0, "f1": f1, "phase": rng.uniform(0, 2 * np.pi)}
    if family == "band_noise":
        lo, hi = (200.0, 800.0) if bin_name == "low" else (2000.0, 5000.0)
        return {"band_lo": lo, "band_hi": hi, "noise_seed": int(rng.integers(2**31))}
    if family == "am_tone":
        mod = rng.uniform(2.0, 4.0) if bin_name == "slow" else rng.uniform(8.0, 16.0)
        return {"carrier": rng.uniform(500.0, 900.0), "mod_rate": mod,
                "phase": rng.uniform(0, 2 * np.pi)}
    if family == "click_train":
        rate = rng.uniform(4.0, 8.0) if bin_name == "sparse" else rng.uniform(16.0, 32.0)
        return {"click_rate": rate, "offset": rng.uniform(0.0, 0.1),
                "decay": rng.uniform(100.0, 300.0)}
    raise ValueError(f"unknown source family {family!r}")


def render_source(spec: SourceSpec, n_samples: int, rate_hz: int) -> np.ndarray:
    """Render one source to ``n_samples`` float64 samples at unit-ish RMS
    (rescaled to _TARGET_RMS)."""
    t = np.arange(n_samples) / rate_hz
    p = spec.params
    if spec.family == "sine":
        x = np.sin(2 * np.pi * p["freq"] * t + p["phase"])
    elif spec.family == "harmonic_stack":
        x = np.zeros(n_samples)
        for k in range(1, p["harmonics"] + 1):
            x += np.sin(2 * np.pi * k * p["f0"] * t + k * p["phase"]) / k
    elif spec.family == "chirp":
        dur = n_samples / rate_hz
        inst = p["f0"] + (p["f1"] - p["f0"]) * t / (2 * dur)
        x = np.sin(2 * np.pi * inst * t + p["phase"])
    elif spec.family == "band_noise":
        rng = np.random.default_rng(p["noise_seed"])
        spec_full = np.fft.rfft(rng.standard_normal(n_samples))
        freqs = np.fft.rfftfreq(n_samples, 1.0 / rate_hz)
        mask = (freqs >= p["band_lo"]) & (freqs <= p["band_hi"])
        x = np.fft.irfft(spec_full * mask, n=n_samples)
    elif spec.family == "am_tone":
        env = 0.5 + 0.5 * np.sin(2 * np.pi * p["mod_rate"] * t)
        x = env * np.sin(2 * np.pi * p["carrier"] * t + p["phase"])
    elif spec.family == "click_train":
        x = np.zeros(n_samples)
        period = rate_hz / p["click_rate"]
        pos = p["offset"] * rate_hz
        while pos < n_samples:
            i = int(pos)
            length = min(n_samples - i, 256)
            x[i : i + length] += np.exp(-p["decay"] * np.arange(length) / rate_hz)
            pos += period
    else:
        raise ValueError(f"unknown source family {spec.family!r}")
    rms = np.sqrt(np.mean(x**2))
    if rms > 0:
        x = x * (_TARGET_RMS / rms)
    return x


def _pick_specs(rng: np.random.Generator, n: int) -> list[SourceSpec]:
    if n > len(SOURCE_BINS):
        raise ValueError(
            f"cannot draw {n} components from {len(SOURCE_BINS)} distinct "
            "source keywords"
        )
    idx = rng.choice(len(SOURCE_BINS), size=n, replace=False)
    specs = []
    for i in idx:
        family, bin_name, keyword, phrase = SOURCE_BINS[i]
        specs.append(SourceSpec(family, bin_name, keyword, phrase,
                                _sample_params(family, bin_name, rng)))
    return specs


def _assemble(specs: list[SourceSpec], snr_db: float, n_samples: int,
              rate_hz: int, kind: str, query: str, example_id: str) -> MixtureExample:
    waves = [render_source(s, n_samples, rate_hz) for s in specs]
    target = waves[0]
    others = waves[1:]
    e_target = float(np.sum(target**2))
    e_others = float(sum(np.sum(w**2) for w in others))
    # 10*log10(E_target / E_nontarget) = snr_db
    gain = np.sqrt(e_target / (e_others * 10.0 ** (snr_db / 10.0)))
    others = [w * gain for w in others]
    peak = max(np.max(np.abs(target)), max(np.max(np.abs(w)) for w in others))
    total_peak = np.max(np.abs(target + sum(others)))
    peak = max(peak, total_peak)
    if peak > _PEAK_LIMIT:
        scale = _PEAK_LIMIT / peak
        target = target * scale
        others = [w * scale for w in others]
    mixture = target.copy()
    for w in others:
        mixture = mixture + w
    return MixtureExample(
        mixture=Waveform(mixture, rate_hz),
        target=Waveform(target, rate_hz),
        query=query,
        query_kind=kind,
        snr_db=float(snr_db),
        component_keywords=[s.keyword for s in specs],
        interferers=[Waveform(w, rate_hz) for w in others],
        pool=kind,
        example_id=example_id,
    )


def iter_examples(n: int, kind: str, chunk_s: float, rate_hz: int, seed: int,
                  components_min: int = 2, components_max: int = 4):
    """Lazily generate ``n`` mixture examples; memory-light for audits."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind not in ("keyword", "caption"):
        raise ValueError(f"unknown corpus kind {kind!r}")
    n_samples = int(round(chunk_s * rate_hz))
    pool_tag = 0 if kind == "keyword" else 1
    root = np.random.SeedSequence(entropy=seed, spawn_key=(pool_tag,))
    for i, child in enumerate(root.spawn(n)):
        rng = np.random.default_rng(child)
        if kind == "keyword":
            n_comp = int(rng.integers(components_min, components_max + 1))
        else:
            n_comp = 2
        specs = _pick_specs(rng, n_comp)
        snr_db = float(rng.uniform(-20.0, 20.0))
        if kind == "keyword":
            query = format_keyword_query([specs[0].keyword])
        else:
            template = CAPTION_TEMPLATES[int(rng.integers(len(CAPTION_TEMPLATES)))]
            query = template.format(target=specs[0].caption_phrase,
                                    other=specs[1].caption_phrase)
        yield _assemble(specs, snr_db, n_samples, rate_hz, kind,
                        query, f"{kind}-{i:06d}")


def synth_corpus(n: int, kind: str, chunk_s: float, rate_hz: int, seed: int,
                 components_min: int = 2, components_max: int = 4) -> list[MixtureExample]:
    """Materialise a corpus as a list; see :func:`iter_examples`."""
    return list(iter_examples(n, kind, chunk_s, rate_hz, seed,
                              components_min, components_max))


def synth_fixed_pairs(n_mixtures: int, chunk_s: float, rate_hz: int, seed: int,
                      snr_db: float = 0.0) -> list[MixtureExample]:
    """Two-source mixtures, each yielded twice with the roles swapped, so
    a model trained on them must rely on the embedding to pick its target.
    Returns ``2 * n_mixtures`` examples over ``n_mixtures`` distinct
    mixture waveforms."""
    n_samples = int(round(chunk_s * rate_hz))
    root = np.random.SeedSequence(entropy=seed, spawn_key=(2,))
    out = []
    for i, child in enumerate(root.spawn(n_mixtures)):
        rng = np.random.default_rng(child)
        specs = _pick_specs(rng, 2)
        for direction in (0, 1):
            ordered = [specs[direction], specs[1 - direction]]
            ex = _assemble(ordered, snr_db, n_samples, rate_hz, "keyword",
                           format_keyword_query([ordered[0].keyword]),
                           f"pair-{i:03d}-{direction}")
            out.append(ex)
    return out


def write_corpus(out_dir: str | Path, examples: list[MixtureExample]) -> Path:
    """Write WAV pairs plus a line-delimited manifest; returns the manifest
    path."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as f:
        for ex in examples:
            mix_path = out_dir / "audio" / f"{ex.example_id}_mixture.wav"
            tgt_path = out_dir / "audio" / f"{ex.example_id}_target.wav"
            write_wav(mix_path, ex.mixture)
            write_wav(tgt_path, ex.target)
            f.write(json.dumps({
                "id": ex.example_id,
                "mixture": str(mix_path.relative_to(out_dir)),
                "target": str(tgt_path.relative_to(out_dir)),
                "query": ex.query,
                "kind": ex.query_kind,
                "snr_db": ex.snr_db,
                "keywords": ex.component_keywords,
                "pool": ex.pool,
            }) + "\n")
    return manifest


def read_manifest(manifest_path: str | Path) -> list[dict]:
    rows = []
    with open(manifest_path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
