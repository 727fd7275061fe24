"""Synthetic re-identification data.

Each action holds its own roster of identities; identity labels never
carry across actions.  An identity is a latent appearance (jersey,
stripe pattern, shorts, skin tone) plus a limb pose phase; each view
renders it with per-view nuisance (background, placement, limb jitter,
brightness, pixel noise).  View 0 of every identity is the query, view
1 the gallery, and the rest are training samples.  Optional distractor
identities render a single gallery-only view.

All randomness derives from the dataset seed: identity latents from
(seed, 1, action, pid), view nuisance from (seed, 2, sample_id), so
any sample can be regenerated in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tsrio
from .errors import ConfigurationError, DataIOError, ValidationError

ROLES = ("query", "gallery", "train")
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.tsv"

_LATENT_SALT = 1
_VIEW_SALT = 2


@dataclass(frozen=True)
class Sample:
    sample_id: int
    action_id: int
    pid: int
    role: str
    tensor_path: str


@dataclass
class Manifest:
    image_shape: tuple[int, int, int]
    records: list[Sample] = field(default_factory=list)
    version: int = MANIFEST_VERSION

    @property
    def num_samples(self) -> int:
        return len(self.records)

    @property
    def num_actions(self) -> int:
        return len({r.action_id for r in self.records})

    def with_role(self, role: str) -> list[Sample]:
        return [r for r in self.records if r.role == role]

    def actions(self) -> dict[int, list[Sample]]:
        out: dict[int, list[Sample]] = {}
        for r in self.records:
            out.setdefault(r.action_id, []).append(r)
        return out

    def train_groups(self) -> dict[tuple[int, int], list[Sample]]:
        """Training samples grouped by (action_id, pid), sorted keys."""
        groups: dict[tuple[int, int], list[Sample]] = {}
        for r in self.records:
            if r.role == "train":
                groups.setdefault((r.action_id, r.pid), []).append(r)
        return dict(sorted(groups.items()))


@dataclass
class PKBatch:
    p: int
    k: int
    samples: list[Sample]


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _IdentityLatent:
    torso: np.ndarray
    stripe: np.ndarray
    stripe_band: int
    shorts: np.ndarray
    skin: np.ndarray
    limb_phase: float
    limb_amp: float


# Low-discrepancy hue steps: frac(i * g) spreads any prefix of identities
# almost evenly around the hue circle, so same-action jerseys never nearly
# collide the way independent uniform draws can.
_HUE_STEP_TORSO = 0.6180339887498949  # frac(golden ratio)
_HUE_STEP_SHORTS = 0.41421356237309515  # frac(sqrt 2), decorrelated from torso


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    h = h % 1.0
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return np.array(rgb)


def _identity_latent(seed: int, action_id: int, pid: int) -> _IdentityLatent:
    rng = np.random.default_rng([seed, _LATENT_SALT, action_id, pid])
    arng = np.random.default_rng([seed, _LATENT_SALT, action_id])
    base_torso, base_shorts = arng.uniform(0.0, 1.0, 2)
    torso = _hsv(base_torso + _HUE_STEP_TORSO * pid, 0.88, 0.82)
    stripe_band = int(rng.integers(2, 6))
    # Stripe color alternates light/dark so torso hue stays the dominant cue.
    stripe = np.full(3, 0.9) if pid % 2 == 0 else np.full(3, 0.12)
    shorts = _hsv(base_shorts + _HUE_STEP_SHORTS * pid, 0.75, 0.75)
    tone = rng.uniform(0.45, 0.95)
    skin = np.array([tone, tone * 0.82, tone * 0.66])
    limb_phase = float(rng.uniform(0.0, 2.0 * math.pi))
    limb_amp = float(rng.uniform(0.4, 1.0))
    return _IdentityLatent(torso, stripe, stripe_band, shorts, skin, limb_phase, limb_amp)


def _render_view(
    image_shape: tuple[int, int, int],
    latent: _IdentityLatent,
    seed: int,
    sample_id: int,
) -> np.ndarray:
    _, h, w = image_shape
    rng = np.random.default_rng([seed, _VIEW_SALT, sample_id])

    # Background: pitch-like gradient between two random greens, with an
    # occasional pale horizontal band standing in for an advertising board.
    u = rng.uniform(0.0, 1.0, (2, 3))
    bg0 = np.array([0.04, 0.22, 0.03]) + u[0] * np.array([0.12, 0.30, 0.12])
    bg1 = np.array([0.04, 0.22, 0.03]) + u[1] * np.array([0.12, 0.30, 0.12])
    axis = rng.uniform(0.0, 1.0)
    yy = np.linspace(0.0, 1.0, h)[:, None]
    xx = np.linspace(0.0, 1.0, w)[None, :]
    grad = axis * yy + (1.0 - axis) * xx
    img = bg0[:, None, None] + (bg1 - bg0)[:, None, None] * grad[None, :, :]
    if rng.uniform() < 0.5:
        band0 = int(rng.integers(0, max(h // 5, 1)))
        band1 = band0 + max(h // 16, 1)
        img[:, band0:band1, :] = rng.uniform(0.55, 0.85, 3)[:, None, None]

    # Person box placement with scale and offset jitter.
    scale = rng.uniform(0.72, 1.0)
    box_h = max(8, int(round(h * 0.72 * scale)))
    box_w = max(4, int(round(w * 0.62 * scale)))
    dy = int(rng.integers(-4, 5))
    dx = int(rng.integers(-2, 3))
    top = min(max((h - box_h) // 2 + dy, 0), h - box_h)
    left = min(max((w - box_w) // 2 + dx, 0), w - box_w)
    phase = latent.limb_phase + float(rng.normal(0.0, 0.35))
    swing = latent.limb_amp * math.sin(phase)

    def rows(f0: float, f1: float) -> tuple[int, int]:
        return top + int(round(box_h * f0)), top + int(round(box_h * f1))

    def cols(f0: float, f1: float) -> tuple[int, int]:
        return left + int(round(box_w * f0)), left + int(round(box_w * f1))

    # Head.
    r0, r1 = rows(0.0, 0.15)
    c0, c1 = cols(0.32, 0.68)
    img[:, r0:r1, c0:c1] = latent.skin[:, None, None]

    # Torso with stripe bands.
    r0, r1 = rows(0.15, 0.55)
    c0, c1 = cols(0.12, 0.88)
    img[:, r0:r1, c0:c1] = latent.torso[:, None, None]
    torso_rows = np.arange(r0, r1)
    striped = torso_rows[((torso_rows - r0) // latent.stripe_band) % 2 == 1]
    img[:, striped, c0:c1] = latent.stripe[:, None, None]

    # Arms: skin strips at the torso sides, raised or lowered by the swing.
    arm_shift = int(round(0.08 * box_h * swing))
    a0, a1 = rows(0.18, 0.50)
    la0, la1 = max(a0 + arm_shift, top), max(a1 + arm_shift, top)
    ra0, ra1 = max(a0 - arm_shift, top), max(a1 - arm_shift, top)
    c0, c1 = cols(0.0, 0.14)
    img[:, la0:la1, c0:c1] = latent.skin[:, None, None]
    c0, c1 = cols(0.86, 1.0)
    img[:, ra0:ra1, c0:c1] = latent.skin[:, None, None]

    # Shorts.
    r0, r1 = rows(0.55, 0.72)
    c0, c1 = cols(0.15, 0.85)
    img[:, r0:r1, c0:c1] = latent.shorts[:, None, None]

    # Legs: two skin strips whose spread follows the limb swing.
    r0, r1 = rows(0.72, 1.0)
    spread = 0.12 + 0.08 * swing
    c0, c1 = cols(0.30 - spread / 2.0, 0.30 + spread / 2.0 + 0.14)
    img[:, r0:r1, c0:c1] = latent.skin[:, None, None]
    c0, c1 = cols(0.70 - spread / 2.0 - 0.14, 0.70 + spread / 2.0)
    img[:, r0:r1, c0:c1] = latent.skin[:, None, None]

    brightness = rng.uniform(0.8, 1.2)
    img = img * brightness
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate_synthetic(
    num_actions: int,
    ids_per_action: int,
    views_per_id: int,
    image_shape: tuple[int, int, int],
    seed: int,
    out_dir,
    distractors_per_action: int = 0,
) -> Manifest:
    """Render a dataset to `out_dir` and return its manifest.

    Distractor identities (pid at or above `ids_per_action`) contribute
    one gallery-only view each; no query ever shares their pid.
    """
    if num_actions < 1 or ids_per_action < 1:
        raise ConfigurationError("num_actions and ids_per_action must be >= 1")
    if views_per_id < 2:
        raise ConfigurationError(
            f"views_per_id must be >= 2 so each identity has a query and a "
            f"gallery view, got {views_per_id}"
        )
    if distractors_per_action < 0:
        raise ConfigurationError("distractors_per_action must be >= 0")
    c, h, w = (int(e) for e in image_shape)
    if c != 3 or h < 16 or w < 8:
        raise ConfigurationError(
            f"renderer needs a 3xHxW shape with H >= 16, W >= 8, got {image_shape}"
        )
    shape = (c, h, w)

    out = Path(out_dir)
    tensors = out / "tensors"
    try:
        tensors.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create output directory {tensors}: {exc}") from exc

    records: list[Sample] = []
    sample_id = 0

    def emit(action_id: int, pid: int, role: str) -> None:
        nonlocal sample_id
        latent = _identity_latent(seed, action_id, pid)
        img = _render_view(shape, latent, seed, sample_id)
        rel = f"tensors/{sample_id:06d}.tsr"
        tsrio.write_tensor(out / rel, img)
        records.append(Sample(sample_id, action_id, pid, role, rel))
        sample_id += 1

    for action_id in range(num_actions):
        for pid in range(ids_per_action):
            for view in range(views_per_id):
                role = "query" if view == 0 else "gallery" if view == 1 else "train"
                emit(action_id, pid, role)
        for d in range(distractors_per_action):
            emit(action_id, ids_per_action + d, "gallery")

    manifest = Manifest(shape, records)
    save_manifest(manifest, out / MANIFEST_NAME)
    return manifest


# ---------------------------------------------------------------------------
# manifest serialization and validation
# ---------------------------------------------------------------------------


def save_manifest(manifest: Manifest, path) -> None:
    c, h, w = manifest.image_shape
    lines = [
        f"# manifest v{manifest.version}",
        f"# shape {c}x{h}x{w}",
        f"# samples {manifest.num_samples}",
        f"# actions {manifest.num_actions}",
    ]
    for r in manifest.records:
        lines.append(f"{r.sample_id}\t{r.action_id}\t{r.pid}\t{r.role}\t{r.tensor_path}")
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot write manifest {path}: {exc}") from exc


def _parse_manifest(path) -> Manifest:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read manifest {path}: {exc}") from exc
    version = None
    shape = None
    declared_samples = None
    records: list[Sample] = []
    problems: list[str] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            fields = line[1:].split()
            if len(fields) == 2 and fields[0] == "manifest":
                version = int(fields[1].lstrip("v"))
            elif len(fields) == 2 and fields[0] == "shape":
                shape = tuple(int(e) for e in fields[1].split("x"))
            elif len(fields) == 2 and fields[0] == "samples":
                declared_samples = int(fields[1])
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            problems.append(f"line {line_no}: expected 5 tab-separated fields")
            continue
        try:
            records.append(
                Sample(int(parts[0]), int(parts[1]), int(parts[2]), parts[3], parts[4])
            )
        except ValueError as exc:
            problems.append(f"line {line_no}: {exc}")
    if version != MANIFEST_VERSION:
        problems.append(f"unsupported manifest version {version}")
    if shape is None or len(shape) != 3:
        problems.append("missing or malformed shape header")
        shape = (0, 0, 0)
    if declared_samples is not None and declared_samples != len(records):
        problems.append(
            f"header declares {declared_samples} samples, found {len(records)}"
        )
    if problems:
        raise ValidationError(problems)
    return Manifest(tuple(shape), records)


def validate_manifest(
    manifest: Manifest, base_dir, check_files: bool = True
) -> list[str]:
    """Return every invariant violation (empty list when valid)."""
    violations: list[str] = []
    seen: dict[int, int] = {}
    base = Path(base_dir)

    gallery_keys = {
        (r.action_id, r.pid) for r in manifest.records if r.role == "gallery"
    }
    for idx, r in enumerate(manifest.records):
        if r.role not in ROLES:
            violations.append(f"record {idx} (sample {r.sample_id}): bad role {r.role!r}")
        if r.sample_id in seen:
            violations.append(
                f"record {idx}: duplicate sample_id {r.sample_id} "
                f"(first at record {seen[r.sample_id]})"
            )
        else:
            seen[r.sample_id] = idx
        if r.role == "query" and (r.action_id, r.pid) not in gallery_keys:
            violations.append(
                f"record {idx} (sample {r.sample_id}): query pid {r.pid} has no "
                f"gallery sample in action {r.action_id}"
            )
        if check_files:
            fpath = base / r.tensor_path
            try:
                shape = tsrio.read_shape(fpath)
            except DataIOError as exc:
                violations.append(f"record {idx} (sample {r.sample_id}): {exc}")
                continue
            if shape != tuple(manifest.image_shape):
                violations.append(
                    f"record {idx} (sample {r.sample_id}): tensor shape {shape} "
                    f"differs from declared {tuple(manifest.image_shape)}"
                )
    return violations


def load_manifest(path, check_files: bool = True) -> Manifest:
    """Parse and fully validate a manifest; lists every violation on failure."""
    manifest = _parse_manifest(path)
    violations = validate_manifest(manifest, Path(path).parent, check_files)
    if violations:
        raise ValidationError(violations)
    return manifest


def load_image(manifest_dir, sample: Sample) -> np.ndarray:
    try:
        return tsrio.read_tensor(Path(manifest_dir) / sample.tensor_path)
    except DataIOError as exc:
        raise DataIOError(f"sample {sample.sample_id}: {exc}") from exc


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


def sample_pk_batch(
    manifest: Manifest, p: int, k: int, rng: np.random.Generator
) -> PKBatch:
    """Draw P distinct train identities, K samples each.

    Identities with fewer than K training views are sampled with
    replacement; others without.
    """
    if p < 1 or k < 1:
        raise ConfigurationError(f"need p >= 1 and k >= 1, got p={p}, k={k}")
    groups = manifest.train_groups()
    keys = list(groups.keys())
    if len(keys) < p:
        raise ConfigurationError(
            f"train split has {len(keys)} identities, need at least {p}"
        )
    chosen = rng.choice(len(keys), size=p, replace=False)
    samples: list[Sample] = []
    for gi in chosen:
        pool = groups[keys[int(gi)]]
        if len(pool) >= k:
            picks = rng.choice(len(pool), size=k, replace=False)
        else:
            picks = rng.integers(0, len(pool), size=k)
        samples.extend(pool[int(j)] for j in picks)
    return PKBatch(p, k, samples)
