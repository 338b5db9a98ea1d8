"""Procedural toy speech world: parallel normal and electrolarynx-like
corpora with gold phoneme alignments.

Utterances are sums of two per-phoneme formant sinusoids, amplitude
modulated at the speaker's F0. Normal speakers get a slowly varying F0
contour; EL speakers get a constant F0 plus square-wave buzz harmonics
and additive noise, the classic electrolarynx signature. Nothing here
aims for acoustic realism; the point is a fully reproducible corpus
whose EL side is measurably harder than its normal side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .errors import ConfigError, ContractError

PHONEMES = list("abcdefghijklmnop")
PAUSE = "sp"
BOS = "<s>"
EOS = "</s>"
VOCAB = PHONEMES + [PAUSE, BOS, EOS]
TOKEN_TO_ID = {t: i for i, t in enumerate(VOCAB)}
PAUSE_ID = TOKEN_TO_ID[PAUSE]
N_CLASSES = len(PHONEMES) + 1  # frame classes: phonemes plus silence/pause

# language-level base formants (Hz); speakers apply a vocal-tract shift
_F2_ORDER = [9, 2, 12, 5, 15, 0, 7, 11, 3, 14, 6, 10, 1, 13, 4, 8]
BASE_FORMANTS = np.array(
    [[260.0 + 88.0 * i, 2050.0 + 265.0 * _F2_ORDER[i]] for i in range(len(PHONEMES))])

_PAUSE_MS = (60.0, 200.0, 110.0, 25.0)   # min, max, mean, std
_EDGE_MS = 60.0                          # BOS/EOS silence
_DUR_CLAMP_MS = (40.0, 300.0)


def encode_tokens(tokens):
    try:
        return np.array([TOKEN_TO_ID[t] for t in tokens], dtype=np.int64)
    except KeyError as exc:
        raise ContractError(f"unknown token {exc.args[0]!r}") from exc


def content_tokens(tokens):
    """Tokens that carry linguistic content (no BOS/EOS/PAUSE)."""
    return [t for t in tokens if t in TOKEN_TO_ID and t not in (BOS, EOS, PAUSE)]


def validate_seq(tokens):
    if not tokens or tokens[0] != BOS or tokens[-1] != EOS:
        raise ContractError("sequence must start with BOS and end with EOS")
    if tokens.count(BOS) != 1 or tokens.count(EOS) != 1:
        raise ContractError("BOS/EOS must appear exactly once")


@dataclass
class SpeakerSpec:
    """Synthesis recipe for one voice."""

    formants: np.ndarray          # (16, 2) Hz
    base_f0: float
    f0_contour_amp: float         # Hz; 0 for EL voices
    f0_contour_rate: float        # Hz of the slow contour
    dur_mean_ms: float
    dur_std_ms: float
    buzz_harmonics: int = 0
    buzz_gain: float = 0.0
    noise_gain: float = 0.0

    def __post_init__(self):
        self.formants = np.asarray(self.formants, dtype=np.float64)
        if self.is_el:
            if self.f0_contour_amp != 0.0:
                raise ConfigError("EL voice must have a constant F0 (contour amp 0)")
        else:
            if self.f0_contour_amp <= 0.0:
                raise ConfigError("normal voice needs a positive F0 contour amplitude")

    @property
    def is_el(self):
        return self.buzz_gain > 0.0


def normal_speaker(shift=1.0, base_f0=150.0, contour_amp=25.0, contour_rate=1.3,
                   dur_mean_ms=90.0, dur_std_ms=30.0):
    return SpeakerSpec(formants=BASE_FORMANTS * shift, base_f0=base_f0,
                       f0_contour_amp=contour_amp, f0_contour_rate=contour_rate,
                       dur_mean_ms=dur_mean_ms, dur_std_ms=dur_std_ms)


def el_speaker(shift=1.0, base_f0=85.0, dur_mean_ms=110.0, dur_std_ms=35.0,
               buzz_harmonics=7, buzz_gain=0.35, noise_gain=0.04):
    return SpeakerSpec(formants=BASE_FORMANTS * shift, base_f0=base_f0,
                       f0_contour_amp=0.0, f0_contour_rate=0.0,
                       dur_mean_ms=dur_mean_ms, dur_std_ms=dur_std_ms,
                       buzz_harmonics=buzz_harmonics, buzz_gain=buzz_gain,
                       noise_gain=noise_gain)


@dataclass
class Utterance:
    id: str
    tokens: tuple
    wave: dsp.Waveform | None = None
    mel: dsp.MelSpec | None = None
    alignment: list | None = None     # (start_frame, end_frame) per token
    provenance: str = "natural"       # natural | spd


@dataclass
class Corpus:
    name: str
    utterances: list
    pairing: dict = field(default_factory=dict)   # source id -> target id

    def __len__(self):
        return len(self.utterances)

    def by_id(self, utt_id):
        for utt in self.utterances:
            if utt.id == utt_id:
                return utt
        raise KeyError(utt_id)


# --- text sampling ---------------------------------------------------------------

def sample_text(rng, len_range=(3, 8)):
    """Random phoneme sequence with occasional pauses, wrapped in BOS/EOS."""
    lo, hi = len_range
    if lo < 3 or hi > 24 or lo > hi:
        raise ContractError(f"content length range must sit inside [3, 24], got {len_range}")
    n = int(rng.integers(lo, hi + 1))
    tokens = [BOS]
    for i in range(n):
        tokens.append(PHONEMES[int(rng.integers(len(PHONEMES)))])
        if i < n - 1 and rng.random() < 0.1:
            tokens.append(PAUSE)
    tokens.append(EOS)
    return tokens


# --- waveform synthesis ------------------------------------------------------------

def _token_duration_s(token, spk: SpeakerSpec, rng):
    if token in (BOS, EOS):
        return _EDGE_MS / 1000.0
    if token == PAUSE:
        lo, hi, mean, std = _PAUSE_MS
        return float(np.clip(rng.normal(mean, std), lo, hi)) / 1000.0
    lo, hi = _DUR_CLAMP_MS
    return float(np.clip(rng.normal(spk.dur_mean_ms, spk.dur_std_ms), lo, hi)) / 1000.0


def synth_utterance(tokens, spk: SpeakerSpec, rng, utt_id="utt") -> Utterance:
    """Render one utterance and record its gold frame alignment."""
    validate_seq(tokens)
    sr = dsp.SAMPLE_RATE
    durations = [_token_duration_s(t, spk, rng) for t in tokens]
    lengths = [max(1, int(round(d * sr))) for d in durations]
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    total = int(bounds[-1])

    t = np.arange(total) / sr
    f0 = np.full(total, spk.base_f0)
    if spk.f0_contour_amp > 0:
        f0 = f0 + spk.f0_contour_amp * np.sin(2 * np.pi * spk.f0_contour_rate * t)
    voicing_phase = 2 * np.pi * np.cumsum(f0) / sr
    envelope = 0.5 * (1.0 - np.cos(voicing_phase))

    out = np.zeros(total)
    ramp_n = int(0.005 * sr)
    ramp = np.linspace(0.0, 1.0, ramp_n)
    for tok, s, e in zip(tokens, bounds[:-1], bounds[1:]):
        s, e = int(s), int(e)
        if tok in (BOS, EOS, PAUSE):
            continue
        seg_t = t[s:e]
        f1, f2 = spk.formants[TOKEN_TO_ID[tok]]
        seg = np.sin(2 * np.pi * f1 * seg_t) + 0.6 * np.sin(2 * np.pi * f2 * seg_t)
        seg = seg * envelope[s:e]
        if spk.buzz_gain > 0:
            buzz = np.zeros_like(seg_t)
            for k in range(1, 2 * spk.buzz_harmonics, 2):
                buzz += np.sin(2 * np.pi * k * spk.base_f0 * seg_t) / k
            seg = seg + spk.buzz_gain * buzz
        if spk.noise_gain > 0:
            seg = seg + spk.noise_gain * rng.standard_normal(seg.size)
        n = min(ramp_n, seg.size // 2)
        if n > 0:
            seg[:n] *= ramp[:n]
            seg[-n:] *= ramp[:n][::-1]
        out[s:e] = seg

    peak = np.abs(out).max()
    if peak > 0:
        out = 0.9 * out / peak
    wave = dsp.Waveform(out.astype(np.float32))

    n_frames = dsp.n_frames_for(total)
    centers = np.arange(n_frames) * dsp.HOP
    token_of_frame = np.minimum(np.searchsorted(bounds, centers, side="right") - 1,
                                len(tokens) - 1)
    alignment = []
    for i in range(len(tokens)):
        members = np.nonzero(token_of_frame == i)[0]
        if members.size == 0:
            cut = alignment[-1][1] if alignment else 0
            alignment.append((cut, cut))
        else:
            alignment.append((int(members[0]), int(members[-1]) + 1))
    _check_alignment(alignment, n_frames)
    return Utterance(id=utt_id, tokens=tuple(tokens), wave=wave, alignment=alignment)


def _check_alignment(alignment, n_frames):
    pos = 0
    for s, e in alignment:
        if s != pos or e < s:
            raise ContractError(f"alignment spans must be contiguous, got {alignment}")
        pos = e
    if pos != n_frames:
        raise ContractError(f"alignment covers {pos} of {n_frames} frames")


def frame_labels(utt: Utterance):
    """Per-frame class ids for recognizer training: phoneme index or silence."""
    n = utt.alignment[-1][1]
    labels = np.full(n, len(PHONEMES), dtype=np.int64)
    for tok, (s, e) in zip(utt.tokens, utt.alignment):
        if tok not in (BOS, EOS, PAUSE):
            labels[s:e] = TOKEN_TO_ID[tok]
    return labels


# --- world construction ---------------------------------------------------------------

@dataclass
class WorldConfig:
    tts_utts: int = 600
    pair_utts: int = 120
    el2_utts: int = 60
    external_texts: int = 800
    dev_utts: int = 10
    eval_utts: int = 20
    text_len: tuple = (3, 8)


@dataclass
class World:
    config: WorldConfig
    seed: int
    corpora: dict                  # tts / el1 / nsp / el2
    external_texts: list           # (text id, tokens)
    stats: dsp.FeatureStats
    speakers: dict

    def split(self, corpus_name, split_name):
        corpus = self.corpora[corpus_name]
        return [corpus.utterances[i] for i in
                split_indices(len(corpus), self.config, split_name)]


def split_indices(n, config: WorldConfig, split_name):
    """Deterministic split layout: leading train block, then dev, then eval."""
    n_held = config.dev_utts + config.eval_utts
    if n <= n_held:
        raise ConfigError(f"corpus of {n} too small for {n_held} held-out utterances")
    n_train = n - n_held
    if split_name == "train":
        return range(0, n_train)
    if split_name == "dev":
        return range(n_train, n_train + config.dev_utts)
    if split_name == "eval":
        return range(n_train + config.dev_utts, n)
    raise ConfigError(f"unknown split {split_name!r}")


def _utt_rng(seed, stream, index):
    return np.random.default_rng([seed, stream, index])


_STREAMS = {"text_tts": 0, "text_pair": 1, "text_ext": 2,
            "tts": 10, "el1": 11, "nsp": 12, "el2": 13}


def default_speakers():
    return {
        "tts": normal_speaker(shift=1.0, base_f0=150.0, dur_mean_ms=90.0),
        "nsp": normal_speaker(shift=0.96, base_f0=120.0, contour_amp=20.0,
                              dur_mean_ms=95.0),
        "el1": el_speaker(shift=0.96, base_f0=85.0, dur_mean_ms=110.0,
                          buzz_harmonics=7, buzz_gain=0.35, noise_gain=0.04),
        "el2": el_speaker(shift=1.06, base_f0=75.0, dur_mean_ms=120.0, dur_std_ms=40.0,
                          buzz_harmonics=9, buzz_gain=0.45, noise_gain=0.06),
    }


def build_world(config: WorldConfig, seed: int) -> World:
    """Generate every corpus, compute feature statistics, attach features.

    Corpora: `tts` (pretraining voice), the parallel `el1`/`nsp` pair with
    shared texts, the semi-parallel `el2` whose texts are the first el2_utts
    of the pair texts, and text-only external sequences for synthetic data.
    """
    if config.pair_utts <= config.dev_utts + config.eval_utts:
        raise ConfigError("pair_utts too small for the dev/eval split")
    if config.el2_utts > config.pair_utts:
        raise ConfigError("el2_utts cannot exceed pair_utts (texts must be a subset)")
    speakers = default_speakers()

    tts_texts = [sample_text(_utt_rng(seed, _STREAMS["text_tts"], i), config.text_len)
                 for i in range(config.tts_utts)]
    pair_texts = [sample_text(_utt_rng(seed, _STREAMS["text_pair"], i), config.text_len)
                  for i in range(config.pair_utts)]
    external = [(f"ext_{i:04d}",
                 tuple(sample_text(_utt_rng(seed, _STREAMS["text_ext"], i), config.text_len)))
                for i in range(config.external_texts)]

    def make_corpus(name, texts, prefix):
        spk = speakers[name]
        utts = []
        for i, tokens in enumerate(texts):
            rng = _utt_rng(seed, _STREAMS[name], i)
            utts.append(synth_utterance(tokens, spk, rng, utt_id=f"{prefix}_{i:04d}"))
        return Corpus(name=name, utterances=utts)

    tts = make_corpus("tts", tts_texts, "tts")
    el1 = make_corpus("el1", pair_texts, "el1")
    nsp = make_corpus("nsp", pair_texts, "nsp")
    el2 = make_corpus("el2", pair_texts[: config.el2_utts], "el2")

    el1.pairing = {u.id: f"nsp_{i:04d}" for i, u in enumerate(el1.utterances)}
    el2.pairing = {u.id: f"nsp_{i:04d}" for i, u in enumerate(el2.utterances)}
    nsp.pairing = {f"nsp_{i:04d}": u.id for i, u in enumerate(el1.utterances)}

    raw_tts = [dsp.log_mel(u.wave).frames for u in tts.utterances]
    stats = dsp.FeatureStats.from_frames(raw_tts)
    for corpus in (tts, el1, nsp, el2):
        for utt in corpus.utterances:
            utt.mel = dsp.log_mel(utt.wave, stats=stats)

    return World(config=config, seed=seed,
                 corpora={"tts": tts, "el1": el1, "nsp": nsp, "el2": el2},
                 external_texts=external, stats=stats, speakers=speakers)


# --- persistence -------------------------------------------------------------------

def save_world(world: World, out_dir):
    """Write manifests, WAVs, cached features, alignments and statistics."""
    out = Path(out_dir)
    for sub in ("manifests", "wav", "feat", "align"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    world.stats.save(out / "stats.json")
    meta = {"seed": world.seed, "config": vars(world.config) | {"text_len": list(world.config.text_len)}}
    (out / "world.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    for name, corpus in world.corpora.items():
        (out / "wav" / name).mkdir(exist_ok=True)
        (out / "feat" / name).mkdir(exist_ok=True)
        lines = []
        aligns = {}
        for utt in corpus.utterances:
            wav_rel = f"wav/{name}/{utt.id}.wav"
            dsp.wav_write(out / wav_rel, utt.wave)
            dsp.write_mel(out / "feat" / name / f"{utt.id}.mel", utt.mel)
            pair = corpus.pairing.get(utt.id, "-")
            lines.append(f"{utt.id}\t{' '.join(utt.tokens)}\t{wav_rel}\t{pair}")
            aligns[utt.id] = utt.alignment
        (out / "manifests" / f"{name}.tsv").write_text("\n".join(lines) + "\n")
        (out / "align" / f"{name}.json").write_text(json.dumps(aligns, sort_keys=True))

    ext_lines = [f"{tid}\t{' '.join(tokens)}\t-\t-" for tid, tokens in world.external_texts]
    (out / "manifests" / "external.tsv").write_text("\n".join(ext_lines) + "\n")


def load_world(world_dir) -> World:
    """Reload a saved world; features come from the cache, not re-synthesis."""
    root = Path(world_dir)
    if not (root / "world.json").exists():
        raise ConfigError(f"{root}: not a world directory (missing world.json)")
    meta = json.loads((root / "world.json").read_text())
    cfg_dict = dict(meta["config"])
    cfg_dict["text_len"] = tuple(cfg_dict["text_len"])
    config = WorldConfig(**cfg_dict)
    stats = dsp.FeatureStats.load(root / "stats.json")

    corpora = {}
    for name in ("tts", "el1", "nsp", "el2"):
        aligns = json.loads((root / "align" / f"{name}.json").read_text())
        utts = []
        pairing = {}
        for line in (root / "manifests" / f"{name}.tsv").read_text().splitlines():
            utt_id, tokens, _wav_rel, pair = line.split("\t")
            mel = dsp.read_mel(root / "feat" / name / f"{utt_id}.mel")
            utts.append(Utterance(id=utt_id, tokens=tuple(tokens.split(" ")), mel=mel,
                                  alignment=[tuple(span) for span in aligns[utt_id]]))
            if pair != "-":
                pairing[utt_id] = pair
        corpora[name] = Corpus(name=name, utterances=utts, pairing=pairing)

    external = []
    for line in (root / "manifests" / "external.tsv").read_text().splitlines():
        tid, tokens, _, _ = line.split("\t")
        external.append((tid, tuple(tokens.split(" "))))
    return World(config=config, seed=meta["seed"], corpora=corpora,
                 external_texts=external, stats=stats,
                 speakers=default_speakers())
