"""Trajectory ingest: parse recordings, detect merge demonstrations, build features.

A recording is a stream of per-frame vehicle states (CSV columns
``track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width``).
Against a user-supplied scene geometry this module

* groups rows into per-track record lists restricted to the region of interest,
* finds ramp vehicles whose center crosses the lane boundary and cuts one
  demonstration per vehicle, ending at the first frame on the far side,
* computes the eight decision features per frame (lead/lag gaps and speed
  differences, ego speeds in the lane frame, distance to the ramp end, signed
  distance to the boundary),
* resamples each demonstration onto an even percentage grid of the decision
  process (alpha = 0..100%), and
* splits demonstrations into train/test sets reproducibly.

All longitudinal quantities are arc-length coordinates along the lane
boundary polyline; the polyline must be ordered in the direction of travel.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, IntegrityError, ParseError, RejectionError

# Canonical feature order; column order of aligned.csv and of all feature arrays.
FEATURE_NAMES = (
    "dx_lead",
    "dv_lead",
    "vx_ego",
    "vy_ego",
    "dx_lag",
    "dv_lag",
    "dx_end",
    "dy_bdry",
)

CSV_HEADER = ("track_id", "frame_id", "timestamp_ms", "agent_type",
              "x", "y", "vx", "vy", "psi_rad", "length", "width")

# Nominal recording rate is 10 Hz; frame deltas outside this tolerance are gaps.
FRAME_MS = 100
GAP_TOL_MS = 1

# Absent lead/lag neighbor: large finite gap, zero speed difference.
SENTINEL_DX = 200.0
SENTINEL_DV = 0.0

# Demonstrations shorter than this carry no usable temporal context (1.0 s at 10 Hz).
MIN_FRAMES = 10


@dataclass(frozen=True)
class TrajectoryRecord:
    track_id: int
    frame_id: int
    timestamp_ms: int
    agent_type: str  # car | truck | other
    x: float
    y: float
    vx: float
    vy: float
    psi_rad: float
    length: float
    width: float


@dataclass(frozen=True)
class SceneGeometry:
    """Merge-scene geometry in dataset coordinates (meters).

    ``lane_boundary`` is the ramp/highway dividing line as an (K, 2) polyline
    ordered along the travel direction. ``ramp_side`` is +1 when the ramp lane
    lies to the left of the polyline direction, -1 when to the right.
    """

    lane_boundary: np.ndarray
    ramp_end: tuple[float, float]
    roi: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    ramp_side: int = 1

    def validate(self) -> None:
        line = np.asarray(self.lane_boundary, dtype=float)
        if line.ndim != 2 or line.shape[0] < 2 or line.shape[1] != 2:
            raise ConfigError("lane_boundary must be a polyline of >= 2 (x, y) vertices")
        seg = np.diff(line, axis=0)
        if np.any(np.hypot(seg[:, 0], seg[:, 1]) <= 0.0):
            raise ConfigError("lane_boundary polyline has a zero-length segment")
        if self.ramp_side not in (-1, 1):
            raise ConfigError("ramp_side must be +1 or -1")
        x_min, y_min, x_max, y_max = self.roi
        if not (x_min < x_max and y_min < y_max):
            raise ConfigError("roi rectangle is degenerate")
        ex, ey = self.ramp_end
        if not (x_min <= ex <= x_max and y_min <= ey <= y_max):
            raise ConfigError("ramp_end must lie inside the region of interest")

    def contains(self, x: float, y: float) -> bool:
        x_min, y_min, x_max, y_max = self.roi
        return x_min <= x <= x_max and y_min <= y <= y_max


@dataclass(frozen=True)
class FeatureVector:
    """One frame of the eight decision features (Table-style definitions above)."""

    dx_lead: float
    dv_lead: float
    vx_ego: float
    vy_ego: float
    dx_lag: float
    dv_lag: float
    dx_end: float
    dy_bdry: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "FeatureVector":
        if len(values) != len(FEATURE_NAMES):
            raise ContractViolation(f"expected {len(FEATURE_NAMES)} features, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass
class MergeDemonstration:
    """One ego vehicle's merge episode, window ending at the boundary crossing."""

    demo_id: int
    ego_track_id: int
    timestamps_ms: np.ndarray  # (N,) strictly increasing
    features: np.ndarray       # (N, 8) columns ordered as FEATURE_NAMES
    crossing_index: int        # always the last frame index

    @property
    def n_frames(self) -> int:
        return int(self.timestamps_ms.shape[0])

    def frame(self, j: int) -> tuple[int, FeatureVector]:
        return int(self.timestamps_ms[j]), FeatureVector.from_array(self.features[j])


@dataclass
class AlignedDemonstration:
    """Demonstration resampled onto the decision-process percentage grid."""

    demo_id: int
    alphas: np.ndarray  # (A,) percentages, 0..100
    values: np.ndarray  # (A, 8)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, ...]
    test: tuple[int, ...]
    seed: int


class LaneFrame:
    """Arc-length / signed-offset coordinates relative to the boundary polyline.

    The signed offset is positive to the left of the polyline direction;
    multiply by ``ramp_side`` to get the ramp-positive convention used by
    the ``dy_bdry`` feature.
    """

    def __init__(self, polyline: np.ndarray):
        line = np.asarray(polyline, dtype=float)
        if line.ndim != 2 or line.shape[0] < 2:
            raise ConfigError("polyline needs >= 2 vertices")
        self._a = line[:-1]                      # (K, 2) segment starts
        self._d = np.diff(line, axis=0)          # (K, 2) segment vectors
        self._len = np.hypot(self._d[:, 0], self._d[:, 1])
        if np.any(self._len <= 0.0):
            raise ConfigError("polyline has a zero-length segment")
        self._cum = np.concatenate([[0.0], np.cumsum(self._len)])
        self._unit = self._d / self._len[:, None]

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project points onto the polyline.

        Returns (s, d): arc-length of the foot point and signed perpendicular
        offset (left of travel positive). Vectorized over an (N, 2) array.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        rel = p[:, None, :] - self._a[None, :, :]                      # (N, K, 2)
        t = np.einsum("nkd,kd->nk", rel, self._d) / (self._len ** 2)  # (N, K)
        t = np.clip(t, 0.0, 1.0)
        foot = self._a[None, :, :] + t[:, :, None] * self._d[None, :, :]
        offset = p[:, None, :] - foot
        dist2 = np.einsum("nkd,nkd->nk", offset, offset)
        k = np.argmin(dist2, axis=1)                                   # first minimum wins
        idx = np.arange(p.shape[0])
        s = self._cum[k] + t[idx, k] * self._len[k]
        off = offset[idx, k]
        u = self._unit[k]
        d = u[:, 0] * off[:, 1] - u[:, 1] * off[:, 0]                  # z of cross(u, off)
        return s, d

    def tangent_at(self, points: np.ndarray) -> np.ndarray:
        """Unit tangent of the nearest segment for each point, shape (N, 2)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        rel = p[:, None, :] - self._a[None, :, :]
        t = np.einsum("nkd,kd->nk", rel, self._d) / (self._len ** 2)
        t = np.clip(t, 0.0, 1.0)
        foot = self._a[None, :, :] + t[:, :, None] * self._d[None, :, :]
        offset = p[:, None, :] - foot
        dist2 = np.einsum("nkd,nkd->nk", offset, offset)
        k = np.argmin(dist2, axis=1)
        return self._unit[k]

    def lane_velocity(self, points: np.ndarray, velocities: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split world velocities into (longitudinal, lateral-left) lane components."""
        u = self.tangent_at(points)
        v = np.atleast_2d(np.asarray(velocities, dtype=float))
        v_long = u[:, 0] * v[:, 0] + u[:, 1] * v[:, 1]
        v_lat = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]  # positive toward the left
        return v_long, v_lat


@dataclass(frozen=True)
class LaneState:
    """One vehicle's state expressed in the lane frame at a single timestamp."""

    s: float       # arc-length along the boundary [m]
    dy: float      # ramp-positive signed offset from the boundary [m]
    v_long: float  # speed along the lane [m/s]
    v_lat: float   # ramp-positive lateral speed [m/s]


def _coerce_row(row: Mapping[str, object], where: str) -> TrajectoryRecord | None:
    try:
        rec = TrajectoryRecord(
            track_id=int(row["track_id"]),
            frame_id=int(row["frame_id"]),
            timestamp_ms=int(row["timestamp_ms"]),
            agent_type=str(row["agent_type"]).strip().lower(),
            x=float(row["x"]),
            y=float(row["y"]),
            vx=float(row["vx"]),
            vy=float(row["vy"]),
            psi_rad=float(row["psi_rad"]),
            length=float(row["length"]),
            width=float(row["width"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{where}: malformed row ({exc})") from exc
    if not (rec.length > 0.0 and rec.width > 0.0):
        raise ParseError(f"{where}: non-positive vehicle dimensions")
    if not all(math.isfinite(v) for v in (rec.x, rec.y, rec.vx, rec.vy, rec.psi_rad)):
        raise ParseError(f"{where}: non-finite state value")
    if rec.agent_type not in ("car", "truck"):
        return None  # other agent types are dropped
    return rec


def parse_tracks(source, geometry: SceneGeometry) -> dict[int, list[TrajectoryRecord]]:
    """Group records by track, keep car/truck rows inside the ROI.

    ``source`` may be a CSV path, an open text file, or an iterable of row
    mappings. Timestamps must be strictly increasing within each track; a
    violation raises IntegrityError. Tracks with no in-ROI rows are dropped.
    """
    geometry.validate()

    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return parse_tracks(fh, geometry)
    if isinstance(source, io.TextIOBase):
        reader = csv.DictReader(source)
        rows: Iterable[tuple[str, Mapping[str, object]]] = (
            (f"row {reader.line_num}", row) for row in reader
        )
    else:
        rows = ((f"row {i}", row) for i, row in enumerate(source, start=1))

    last_ts: dict[int, int] = {}
    tracks: dict[int, list[TrajectoryRecord]] = {}
    for where, raw in rows:
        rec = _coerce_row(raw, where)
        if rec is None:
            continue
        prev = last_ts.get(rec.track_id)
        if prev is not None and rec.timestamp_ms <= prev:
            raise IntegrityError(
                f"track {rec.track_id}: timestamp {rec.timestamp_ms} not after {prev}"
            )
        last_ts[rec.track_id] = rec.timestamp_ms
        if geometry.contains(rec.x, rec.y):
            tracks.setdefault(rec.track_id, []).append(rec)
    return tracks


def compute_features(ego: LaneState, lead: LaneState | None, lag: LaneState | None,
                     end_s: float, sentinel_dx: float = SENTINEL_DX) -> FeatureVector:
    """Eight decision features for one frame; neighbor assignment already done.

    ``dx_lead``/``dx_lag`` are positive longitudinal gaps to the lead (ahead)
    and lag (behind) vehicles; speed differences are neighbor minus ego.
    Absent neighbors produce the (sentinel_dx, 0) sentinel pair.
    """
    if lead is not None:
        dx_lead, dv_lead = lead.s - ego.s, lead.v_long - ego.v_long
    else:
        dx_lead, dv_lead = sentinel_dx, SENTINEL_DV
    if lag is not None:
        dx_lag, dv_lag = ego.s - lag.s, lag.v_long - ego.v_long
    else:
        dx_lag, dv_lag = sentinel_dx, SENTINEL_DV
    return FeatureVector(
        dx_lead=dx_lead,
        dv_lead=dv_lead,
        vx_ego=ego.v_long,
        vy_ego=ego.v_lat,
        dx_lag=dx_lag,
        dv_lag=dv_lag,
        dx_end=end_s - ego.s,
        dy_bdry=ego.dy,
    )


def _lane_states(lane: LaneFrame, recs: list[TrajectoryRecord], ramp_side: int):
    """Timestamps plus LaneState arrays (s, dy, v_long, v_lat) for one track."""
    xy = np.array([[r.x, r.y] for r in recs])
    vel = np.array([[r.vx, r.vy] for r in recs])
    s, d = lane.locate(xy)
    v_long, v_lat = lane.lane_velocity(xy, vel)
    ts = np.array([r.timestamp_ms for r in recs], dtype=np.int64)
    return ts, s, d * ramp_side, v_long, v_lat * ramp_side


def _contiguous_runs(ts: np.ndarray) -> list[tuple[int, int]]:
    """[start, stop) index ranges whose frame deltas stay within the gap tolerance."""
    if ts.shape[0] == 0:
        return []
    dt = np.diff(ts)
    breaks = np.where(np.abs(dt - FRAME_MS) > GAP_TOL_MS)[0]
    starts = np.concatenate([[0], breaks + 1])
    stops = np.concatenate([breaks + 1, [ts.shape[0]]])
    return list(zip(starts.tolist(), stops.tolist()))


def _pick_neighbor(ds: np.ndarray, ids: np.ndarray) -> int | None:
    """Index of the candidate with the smallest gap; ties go to the lower track id."""
    if ds.shape[0] == 0:
        return None
    best = np.min(ds)
    tied = np.where(ds == best)[0]
    return int(tied[np.argmin(ids[tied])])


def extract_merge_demonstrations(
    tracks: Mapping[int, list[TrajectoryRecord]],
    geometry: SceneGeometry,
    min_frames: int = MIN_FRAMES,
    sentinel_dx: float = SENTINEL_DX,
) -> list[MergeDemonstration]:
    """One demonstration per ramp vehicle whose center crosses the lane boundary.

    The window runs from the vehicle's first in-ROI ramp-side frame to the
    first frame on the far side (dy_bdry <= 0). Tracks that never cross are
    skipped; recording gaps split a track and the crossing must fall inside
    one contiguous run; windows shorter than ``min_frames`` are discarded.
    """
    geometry.validate()
    lane = LaneFrame(geometry.lane_boundary)
    end_s, _ = lane.locate(np.array([geometry.ramp_end]))
    end_s = float(end_s[0])

    states = {
        tid: _lane_states(lane, recs, geometry.ramp_side)
        for tid, recs in tracks.items() if recs
    }

    # Per-timestamp lookup of every vehicle currently on the highway side.
    by_ts: dict[int, list[tuple[int, float, float]]] = {}
    for tid, (ts, s, dy, v_long, _v_lat) in states.items():
        on_highway = dy <= 0.0
        for j in np.where(on_highway)[0]:
            by_ts.setdefault(int(ts[j]), []).append((tid, float(s[j]), float(v_long[j])))

    demos: list[MergeDemonstration] = []
    for tid in sorted(states):
        ts, s, dy, v_long, v_lat = states[tid]
        window = None
        for start, stop in _contiguous_runs(ts):
            if dy[start] <= 0.0:
                continue  # run starts on the highway side: not a ramp approach
            crossed = np.where(dy[start:stop] <= 0.0)[0]
            if crossed.shape[0] == 0:
                continue
            window = (start, start + int(crossed[0]) + 1)  # include the crossing frame
            break
        if window is None:
            continue
        lo, hi = window
        if hi - lo < min_frames:
            continue

        feats = np.empty((hi - lo, len(FEATURE_NAMES)))
        for j in range(lo, hi):
            ego = LaneState(float(s[j]), float(dy[j]), float(v_long[j]), float(v_lat[j]))
            lead = lag = None
            candidates = [c for c in by_ts.get(int(ts[j]), ()) if c[0] != tid]
            if candidates:
                cid = np.array([c[0] for c in candidates])
                cs = np.array([c[1] for c in candidates])
                cv = np.array([c[2] for c in candidates])
                ahead = np.where(cs > ego.s)[0]
                k = _pick_neighbor(cs[ahead] - ego.s, cid[ahead])
                if k is not None:
                    a = ahead[k]
                    lead = LaneState(float(cs[a]), 0.0, float(cv[a]), 0.0)
                behind = np.where(cs < ego.s)[0]
                k = _pick_neighbor(ego.s - cs[behind], cid[behind])
                if k is not None:
                    b = behind[k]
                    lag = LaneState(float(cs[b]), 0.0, float(cv[b]), 0.0)
            feats[j - lo] = compute_features(ego, lead, lag, end_s, sentinel_dx).as_array()

        demos.append(MergeDemonstration(
            demo_id=len(demos),
            ego_track_id=tid,
            timestamps_ms=ts[lo:hi].copy(),
            features=feats,
            crossing_index=hi - lo - 1,
        ))
    return demos


def align_to_grid(demo: MergeDemonstration, resolution: int = 101) -> AlignedDemonstration:
    """Linearly resample a demonstration onto ``resolution`` even grid points.

    The grid spans [first frame, crossing frame]; endpoints are preserved
    exactly, and realigning an already-aligned series is bitwise stable.
    """
    if demo.n_frames < 2:
        raise RejectionError(f"demo {demo.demo_id}: need >= 2 frames to align")
    if resolution < 2:
        raise ConfigError("grid resolution must be >= 2")
    t = demo.timestamps_ms.astype(float)
    t_cross = t[demo.crossing_index]
    grid_t = np.linspace(t[0], t_cross, resolution)
    values = np.empty((resolution, demo.features.shape[1]))
    for m in range(demo.features.shape[1]):
        values[:, m] = np.interp(grid_t, t, demo.features[:, m])
    return AlignedDemonstration(
        demo_id=demo.demo_id,
        alphas=np.linspace(0.0, 100.0, resolution),
        values=values,
    )


def split_dataset(demo_ids: Sequence[int], ratio: float, seed: int) -> DatasetSplit:
    """Uniform random train/test split of demonstration ids, round-half-up."""
    ids = sorted(int(i) for i in demo_ids)
    if len(ids) < 2:
        raise RejectionError("need >= 2 demonstrations to split")
    if not (0.0 < ratio < 1.0):
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    n_train = int(math.floor(len(ids) * ratio + 0.5))
    n_train = min(max(n_train, 1), len(ids) - 1)  # keep both sides nonempty
    perm = np.random.default_rng(seed).permutation(np.array(ids))
    return DatasetSplit(
        train=tuple(sorted(int(i) for i in perm[:n_train])),
        test=tuple(sorted(int(i) for i in perm[n_train:])),
        seed=seed,
    )


def write_aligned_csv(path, aligned: Sequence[AlignedDemonstration]) -> None:
    """Serialize the aligned dataset as one columnar CSV (demo_id, alpha, features)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["demo_id", "alpha"] + list(FEATURE_NAMES))
        for demo in aligned:
            for k in range(demo.alphas.shape[0]):
                writer.writerow(
                    [demo.demo_id, repr(float(demo.alphas[k]))]
                    + [repr(float(v)) for v in demo.values[k]]
                )


def read_aligned_csv(path) -> list[AlignedDemonstration]:
    """Inverse of write_aligned_csv; demos are returned ordered by demo_id."""
    rows: dict[int, list[tuple[float, list[float]]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["demo_id", "alpha"] + list(FEATURE_NAMES):
            raise ParseError(f"{path}: unexpected aligned.csv header {reader.fieldnames}")
        for row in reader:
            try:
                did = int(row["demo_id"])
                alpha = float(row["alpha"])
                vals = [float(row[n]) for n in FEATURE_NAMES]
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path} row {reader.line_num}: {exc}") from exc
            rows.setdefault(did, []).append((alpha, vals))
    demos = []
    for did in sorted(rows):
        pts = rows[did]
        demos.append(AlignedDemonstration(
            demo_id=did,
            alphas=np.array([p[0] for p in pts]),
            values=np.array([p[1] for p in pts]),
        ))
    return demos
