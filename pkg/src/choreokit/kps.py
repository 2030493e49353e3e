"""Kinematic predicate evaluation and the prompted/null success protocol.

Eight deterministic predicates operate on 22-joint positions. The height
axis is auto-detected (largest mean positive head-over-pelvis offset) and
baselines use the mean over the first 10 frames. Spatial thresholds are in
skeleton coordinate units; sigma_s denotes the mean ground-plane shoulder
width and scales the body-relative thresholds.

    primitive   family      criterion
    walk_move   Trajectory  ground displacement > max(0.25, 1.0 * sigma_s)
                            and >= 2 step crossings (sign changes of the
                            along-movement left-right ankle projection)
    jump        Trajectory  pelvis lift over baseline > 0.12 and peak
                            frame-to-frame vertical velocity > 0.6 / s
    turn        Rotation    cumulative absolute hip yaw > 90 degrees
    crouch      Pose        baseline minus minimum pelvis height
                            > max(0.08, 0.15 * |baseline|)
    hands_up    Pose        frames with wrist above shoulder: >= 8% for both
                            arms, or >= 16% for either
    kick        Pose        max ankle lift over baseline > 0.30 with
                            single-leg dominance gap > 0.08
    clap        Pose        >= 10% of frames with wrist-to-wrist distance
                            below 0.60 * sigma_s
    wave        Temporal    wrist-shoulder amplitude > 0.40 * sigma_s,
                            >= 3 zero crossings, dominant frequency of the
                            Hann-windowed signal in [0.5, 2.5] Hz

The success protocol generates, per prompt and group, R sequences with text
conditioning and R with empty text under matched (music, seed) pairs, and
reports prompted rate, null rate, and their difference (lift).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AmbiguousAxesError,
    DegenerateYawError,
    GenerationError,
    InvalidMotionError,
    UnknownPredicateError,
    UserInputError,
)
from .motion import JointSequence, cumulative_yaw, detect_axes, shoulder_width
from .seeding import stable_seed

PREDICATES = ("walk_move", "jump", "turn", "crouch", "hands_up", "kick", "clap", "wave")

FAMILIES = {
    "walk_move": "Trajectory",
    "jump": "Trajectory",
    "turn": "Rotation",
    "crouch": "Pose",
    "hands_up": "Pose",
    "kick": "Pose",
    "clap": "Pose",
    "wave": "Temporal",
}
FAMILY_ORDER = ("Pose", "Trajectory", "Rotation", "Temporal")


@dataclass(frozen=True)
class PredicateThresholds:
    """Predicate thresholds; defaults are the published evaluation values."""

    walk_disp_floor: float = 0.25
    walk_disp_sigma_mult: float = 1.0
    walk_min_crossings: int = 2
    jump_lift: float = 0.12
    jump_peak_vel: float = 0.6
    turn_deg: float = 90.0
    crouch_floor: float = 0.08
    crouch_rest_mult: float = 0.15
    handsup_both_frac: float = 0.08
    handsup_either_frac: float = 0.16
    kick_lift: float = 0.30
    kick_dominance: float = 0.08
    clap_dist_mult: float = 0.60
    clap_frac: float = 0.10
    wave_amp_mult: float = 0.40
    wave_min_crossings: int = 3
    wave_freq_lo: float = 0.5
    wave_freq_hi: float = 2.5
    baseline_frames: int = 10

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) <= 0:
                raise UserInputError(f"threshold {name} must be positive")
        if self.wave_freq_lo >= self.wave_freq_hi:
            raise UserInputError("wave_freq_lo must be below wave_freq_hi")


@dataclass(frozen=True)
class PredicateResult:
    """Outcome of one predicate; every compared quantity is echoed in measured."""

    name: str
    passed: bool
    measured: dict


def _sign_changes(values: np.ndarray) -> int:
    signs = np.sign(values)
    signs = signs[signs != 0]
    if signs.size < 2:
        return 0
    return int(np.count_nonzero(np.diff(signs) != 0))


def _baseline(values: np.ndarray, n: int) -> float:
    return float(values[:n].mean())


def _pred_walk(seq, axes, th):
    sigma = shoulder_width(seq, axes)
    ground = list(axes.ground_axes)
    pelvis = seq.joint("pelvis")[:, ground]
    travel = pelvis[-1] - pelvis[0]
    disp = float(np.linalg.norm(travel))
    threshold = max(th.walk_disp_floor, th.walk_disp_sigma_mult * sigma)
    if disp > 1e-9:
        direction = travel / disp
        ankle_delta = (seq.joint("left_ankle") - seq.joint("right_ankle"))[:, ground]
        crossings = _sign_changes(ankle_delta @ direction)
    else:
        crossings = 0
    measured = {
        "displacement": disp,
        "displacement_threshold": float(threshold),
        "crossings": crossings,
        "min_crossings": int(th.walk_min_crossings),
        "sigma_s": sigma,
    }
    return disp > threshold and crossings >= th.walk_min_crossings, measured


def _pred_jump(seq, axes, th):
    h = seq.joint("pelvis")[:, axes.height_axis]
    base = _baseline(h, th.baseline_frames)
    lift = float(h.max() - base)
    peak_vel = float(np.diff(h).max() * seq.fps) if seq.frames > 1 else 0.0
    measured = {
        "lift": lift,
        "lift_threshold": float(th.jump_lift),
        "peak_velocity": peak_vel,
        "peak_velocity_threshold": float(th.jump_peak_vel),
    }
    return lift > th.jump_lift and peak_vel > th.jump_peak_vel, measured


def _pred_turn(seq, axes, th):
    yaw = cumulative_yaw(seq, axes)
    measured = {"cumulative_yaw_deg": yaw, "yaw_threshold_deg": float(th.turn_deg)}
    return yaw > th.turn_deg, measured


def _pred_crouch(seq, axes, th):
    h = seq.joint("pelvis")[:, axes.height_axis]
    base = _baseline(h, th.baseline_frames)
    depth = float(base - h.min())
    threshold = max(th.crouch_floor, th.crouch_rest_mult * abs(base))
    measured = {
        "depth": depth,
        "depth_threshold": float(threshold),
        "rest_height": base,
    }
    return depth > threshold, measured


def _pred_hands_up(seq, axes, th):
    up = axes.height_axis
    frac = {}
    for side in ("left", "right"):
        wrist = seq.joint(f"{side}_wrist")[:, up]
        shoulder = seq.joint(f"{side}_shoulder")[:, up]
        frac[side] = float(np.mean(wrist > shoulder))
    both = frac["left"] >= th.handsup_both_frac and frac["right"] >= th.handsup_both_frac
    either = max(frac.values()) >= th.handsup_either_frac
    measured = {
        "frac_left": frac["left"],
        "frac_right": frac["right"],
        "both_threshold": float(th.handsup_both_frac),
        "either_threshold": float(th.handsup_either_frac),
    }
    return both or either, measured


def _pred_kick(seq, axes, th):
    up = axes.height_axis
    lifts = []
    for side in ("left", "right"):
        h = seq.joint(f"{side}_ankle")[:, up]
        lifts.append(float(h.max() - _baseline(h, th.baseline_frames)))
    hi, lo = max(lifts), min(lifts)
    gap = hi - lo
    measured = {
        "max_lift": hi,
        "lift_threshold": float(th.kick_lift),
        "dominance_gap": gap,
        "dominance_threshold": float(th.kick_dominance),
    }
    return hi > th.kick_lift and gap > th.kick_dominance, measured


def _pred_clap(seq, axes, th):
    sigma = shoulder_width(seq, axes)
    dist = np.linalg.norm(seq.joint("left_wrist") - seq.joint("right_wrist"), axis=1)
    threshold = th.clap_dist_mult * sigma
    frac = float(np.mean(dist < threshold))
    measured = {
        "close_frac": frac,
        "frac_threshold": float(th.clap_frac),
        "distance_threshold": float(threshold),
        "sigma_s": sigma,
    }
    return frac >= th.clap_frac, measured


def _wave_arm(seq, axes, th, side, sigma):
    rel = seq.joint(f"{side}_wrist") - seq.joint(f"{side}_shoulder")
    ranges = rel.max(axis=0) - rel.min(axis=0)
    axis = int(np.argmax(ranges))
    signal = rel[:, axis]
    amp = float((signal.max() - signal.min()) / 2.0)
    windowed = np.hanning(len(signal)) * (signal - signal.mean())
    crossings = _sign_changes(windowed)
    spectrum = np.abs(np.fft.rfft(windowed))
    freqs = np.fft.rfftfreq(len(signal), d=1.0 / seq.fps)
    # DC excluded; np.argmax takes the first maximum, so ties resolve low.
    dominant = float(freqs[1 + int(np.argmax(spectrum[1:]))]) if len(freqs) > 1 else 0.0
    passed = (
        amp > th.wave_amp_mult * sigma
        and crossings >= th.wave_min_crossings
        and th.wave_freq_lo <= dominant <= th.wave_freq_hi
    )
    stats = {
        "arm": side,
        "axis": axis,
        "amp": amp,
        "amp_threshold": float(th.wave_amp_mult * sigma),
        "n_crossings": crossings,
        "min_crossings": int(th.wave_min_crossings),
        "dominant_freq_hz": dominant,
        "freq_lo": float(th.wave_freq_lo),
        "freq_hi": float(th.wave_freq_hi),
    }
    return passed, stats


def _pred_wave(seq, axes, th):
    # Either arm may carry the wave; report the passing (else larger) arm.
    sigma = shoulder_width(seq, axes)
    results = [_wave_arm(seq, axes, th, side, sigma) for side in ("left", "right")]
    passing = [r for r in results if r[0]]
    chosen = passing[0] if passing else max(results, key=lambda r: r[1]["amp"])
    measured = dict(chosen[1])
    measured["sigma_s"] = sigma
    return chosen[0], measured


_PREDICATE_FNS = {
    "walk_move": _pred_walk,
    "jump": _pred_jump,
    "turn": _pred_turn,
    "crouch": _pred_crouch,
    "hands_up": _pred_hands_up,
    "kick": _pred_kick,
    "clap": _pred_clap,
    "wave": _pred_wave,
}


def eval_predicate(name: str, seq: JointSequence,
                   thresholds: PredicateThresholds | None = None) -> PredicateResult:
    """Evaluate one named predicate on a sequence."""
    if name not in _PREDICATE_FNS:
        raise UnknownPredicateError(f"unknown predicate {name!r}")
    th = thresholds or PredicateThresholds()
    if seq.frames < th.baseline_frames:
        raise InvalidMotionError(
            f"sequence has {seq.frames} frames; baseline needs {th.baseline_frames}")
    axes = detect_axes(seq)
    passed, measured = _PREDICATE_FNS[name](seq, axes, th)
    return PredicateResult(name=name, passed=bool(passed), measured=measured)


def eval_all_predicates(seq: JointSequence,
                        thresholds: PredicateThresholds | None = None) -> dict:
    return {name: eval_predicate(name, seq, thresholds) for name in PREDICATES}


# ---------------------------------------------------------------------------
# Prompted / null / lift protocol

@dataclass
class KpsReport:
    """Per-primitive and per-family success rates with lift = prompt - null."""

    primitives: dict
    families: dict
    macro_average: dict
    replicates: int
    groups: int

    def to_dict(self) -> dict:
        return {
            "primitives": self.primitives,
            "families": self.families,
            "macro_average": self.macro_average,
            "replicates": self.replicates,
            "groups": self.groups,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KpsReport":
        return cls(
            primitives=data["primitives"],
            families=data["families"],
            macro_average=data["macro_average"],
            replicates=data["replicates"],
            groups=data["groups"],
        )


def _rates(prompt_rate: float, null_rate: float) -> dict:
    return {
        "prompt_rate": prompt_rate,
        "null_rate": null_rate,
        "lift": prompt_rate - null_rate,
    }


def aggregate_kps(prompt_hits: dict, null_hits: dict, trials: int, R: int, G: int) -> KpsReport:
    """Fold raw hit counts into primitive, family, and macro rows."""
    primitives = {
        name: _rates(prompt_hits[name] / trials, null_hits[name] / trials)
        for name in prompt_hits
    }
    families = {}
    for family in FAMILY_ORDER:
        members = [n for n in primitives if FAMILIES.get(n) == family]
        if not members:
            continue
        families[family] = {
            key: float(np.mean([primitives[n][key] for n in members]))
            for key in ("prompt_rate", "null_rate")
        }
        families[family]["lift"] = families[family]["prompt_rate"] - families[family]["null_rate"]
    macro = {
        key: float(np.mean([primitives[n][key] for n in primitives]))
        for key in ("prompt_rate", "null_rate")
    }
    macro["lift"] = macro["prompt_rate"] - macro["null_rate"]
    return KpsReport(primitives=primitives, families=families, macro_average=macro,
                     replicates=R, groups=G)


def run_kps(generator, prompts, music_pool, R: int = 10, G: int = 5, seed: int = 0,
            thresholds: PredicateThresholds | None = None) -> KpsReport:
    """Run the prompted/null protocol.

    ``generator`` is a callable ``(music, text_or_None, seed) -> JointSequence``.
    For each of G groups and each prompt, one music clip is drawn from the
    pool, then R prompted and R null-text sequences are generated with matched
    (music, seed) pairs and scored by the prompt's predicate. Degenerate
    kinematics (ambiguous axes, degenerate yaw) count as not passed rather
    than aborting the protocol.
    """
    prompts = list(prompts)
    if R < 1 or G < 1:
        raise UserInputError("R and G must be >= 1")
    if not prompts:
        raise UserInputError("prompt list must be non-empty")
    if not music_pool:
        raise UserInputError("music pool must be non-empty")
    for prompt in prompts:
        if prompt not in _PREDICATE_FNS:
            raise UnknownPredicateError(f"no predicate defined for prompt {prompt!r}")

    prompt_hits = {p: 0 for p in prompts}
    null_hits = {p: 0 for p in prompts}
    for g in range(G):
        for prompt in prompts:
            rng = np.random.default_rng(stable_seed(seed, "music", g, prompt))
            music = music_pool[int(rng.integers(len(music_pool)))]
            for r in range(R):
                sample_seed = stable_seed(seed, "sample", g, prompt, r)
                for text, hits in ((prompt, prompt_hits), (None, null_hits)):
                    try:
                        seq = generator(music, text, sample_seed)
                    except Exception as exc:
                        raise GenerationError(
                            f"generator failed (group {g}, prompt {prompt!r}, "
                            f"replicate {r}, text={text!r})") from exc
                    try:
                        result = eval_predicate(prompt, seq, thresholds)
                        passed = result.passed
                    except (AmbiguousAxesError, DegenerateYawError):
                        passed = False
                    if passed:
                        hits[prompt] += 1
    return aggregate_kps(prompt_hits, null_hits, R * G, R, G)


# ---------------------------------------------------------------------------
# Auxiliary metrics

def beat_alignment_score(kinematic_beats, music_beats, sigma: float = 0.1) -> float:
    """Mean Gaussian agreement between each music beat and its nearest kinematic beat.

    ``sigma`` is the tolerance in seconds (default 0.1 s, three frames at
    30 fps). With no kinematic beats the score is 0.
    """
    music = np.asarray(list(music_beats), dtype=np.float64)
    if music.size == 0:
        raise UserInputError("music beat list must be non-empty")
    if sigma <= 0:
        raise UserInputError("sigma must be positive")
    kin = np.asarray(list(kinematic_beats), dtype=np.float64)
    if kin.size == 0:
        return 0.0
    offsets = np.abs(music[:, None] - kin[None, :]).min(axis=1)
    return float(np.exp(-(offsets ** 2) / (2.0 * sigma ** 2)).mean())


def kinematic_beats(seq: JointSequence) -> list:
    """Times (s) of local minima of mean joint speed below the median speed."""
    if seq.frames < 3:
        raise InvalidMotionError("kinematic beats need at least 3 frames")
    steps = np.diff(seq.positions, axis=0)
    speed = np.linalg.norm(steps, axis=2).mean(axis=1) * seq.fps  # speed at frames 1..k-1
    median = np.median(speed)
    beats = []
    for i in range(1, len(speed) - 1):
        if speed[i] < speed[i - 1] and speed[i] < speed[i + 1] and speed[i] < median:
            beats.append((i + 1) / seq.fps)
    return beats


def diversity(features) -> float:
    """Mean pairwise Euclidean distance over all unordered pairs of vectors."""
    mat = np.asarray([np.asarray(f, dtype=np.float64).ravel() for f in features])
    if mat.ndim != 2 or mat.shape[0] < 2:
        raise UserInputError("diversity needs at least 2 vectors of equal dimension")
    total = 0.0
    n = mat.shape[0]
    for i in range(n - 1):
        total += float(np.linalg.norm(mat[i + 1:] - mat[i], axis=1).sum())
    return total / (n * (n - 1) / 2)
