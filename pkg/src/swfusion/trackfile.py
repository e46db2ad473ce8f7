"""Line-oriented track-file format: the ingestion path for externally
produced feature tracks with initial values (a frontend stand-in).

One record per line, first token a record-type tag, fields space-separated,
floats written in full round-trip precision, '#' starts a comment:

    VERSION 1
    CAM fx fy cx cy baseline width height pixel_sigma
    FRAME id px py pz qw qx qy qz          # initial pose
    LM id x y z                            # initial landmark point
    OBS frame_id lm_id uL vL uR vR         # stereo observation, pixels
    GT frame_id px py pz qw qx qy qz       # optional ground-truth pose

Files parse round-trip losslessly; every id referenced by an observation
must be declared, and a (frame, landmark) pair may be observed only once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .problem import Landmark, Pose, StereoCamera

FORMAT_VERSION = 1


class ParseError(Exception):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class ValidationError(Exception):
    pass


@dataclass
class TrackObservation:
    frame_id: int
    lm_id: int
    z: np.ndarray  # (uL, vL, uR, vR)


@dataclass
class TrackFile:
    camera: StereoCamera
    frames: dict = field(default_factory=dict)  # frame_id -> Pose (initial)
    landmarks: dict = field(default_factory=dict)  # lm_id -> Landmark (initial)
    observations: list = field(default_factory=list)
    ground_truth: dict = field(default_factory=dict)  # frame_id -> Pose
    version: int = FORMAT_VERSION


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trackfile(tf: TrackFile, path) -> None:
    lines = [f"VERSION {tf.version}"]
    c = tf.camera
    lines.append(
        "CAM "
        + " ".join(_fmt(v) for v in (c.fx, c.fy, c.cx, c.cy, c.baseline))
        + f" {c.width} {c.height} "
        + _fmt(c.pixel_sigma)
    )
    for fid in sorted(tf.frames):
        p = tf.frames[fid]
        vals = list(p.position) + list(p.attitude)
        lines.append(f"FRAME {fid} " + " ".join(_fmt(v) for v in vals))
    for lid in sorted(tf.landmarks):
        lines.append(f"LM {lid} " + " ".join(_fmt(v) for v in tf.landmarks[lid].point))
    for o in tf.observations:
        lines.append(f"OBS {o.frame_id} {o.lm_id} " + " ".join(_fmt(v) for v in o.z))
    for fid in sorted(tf.ground_truth):
        p = tf.ground_truth[fid]
        vals = list(p.position) + list(p.attitude)
        lines.append(f"GT {fid} " + " ".join(_fmt(v) for v in vals))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _take_floats(parts: list[str], n: int, line_no: int, what: str) -> list[float]:
    if len(parts) != n:
        raise ParseError(line_no, f"{what}: expected {n} fields, got {len(parts)}")
    out = []
    for p in parts:
        try:
            out.append(float(p))
        except ValueError as exc:
            raise ParseError(line_no, f"{what}: bad number {p!r}") from exc
    return out


def _take_int(token: str, line_no: int, what: str) -> int:
    try:
        return int(token)
    except ValueError as exc:
        raise ParseError(line_no, f"{what}: bad integer {token!r}") from exc


def read_trackfile(path) -> TrackFile:
    """Parse a track file; malformed lines raise ParseError with the line
    number, semantic violations raise ValidationError."""
    camera = None
    version = None
    frames: dict[int, Pose] = {}
    landmarks: dict[int, Landmark] = {}
    observations: list[TrackObservation] = []
    ground_truth: dict[int, Pose] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag, rest = parts[0].upper(), parts[1:]
            if tag == "VERSION":
                if len(rest) != 1:
                    raise ParseError(line_no, "VERSION takes one field")
                version = _take_int(rest[0], line_no, "VERSION")
                if version != FORMAT_VERSION:
                    raise ParseError(line_no, f"unsupported format version {version}")
            elif tag == "CAM":
                vals = _take_floats(rest, 8, line_no, "CAM")
                camera = StereoCamera(
                    fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                    baseline=vals[4], width=int(vals[5]), height=int(vals[6]),
                    pixel_sigma=vals[7],
                )
            elif tag in ("FRAME", "GT"):
                if len(rest) != 8:
                    raise ParseError(line_no, f"{tag}: expected id + 7 fields")
                fid = _take_int(rest[0], line_no, tag)
                vals = _take_floats(rest[1:], 7, line_no, tag)
                pose = Pose(vals[0:3], vals[3:7])
                target = frames if tag == "FRAME" else ground_truth
                if fid in target:
                    raise ParseError(line_no, f"duplicate {tag} id {fid}")
                target[fid] = pose
            elif tag == "LM":
                if len(rest) != 4:
                    raise ParseError(line_no, "LM: expected id + 3 fields")
                lid = _take_int(rest[0], line_no, "LM")
                if lid in landmarks:
                    raise ParseError(line_no, f"duplicate LM id {lid}")
                landmarks[lid] = Landmark(_take_floats(rest[1:], 3, line_no, "LM"))
            elif tag == "OBS":
                if len(rest) != 6:
                    raise ParseError(line_no, "OBS: expected frame_id lm_id + 4 pixels")
                fid = _take_int(rest[0], line_no, "OBS")
                lid = _take_int(rest[1], line_no, "OBS")
                z = np.array(_take_floats(rest[2:], 4, line_no, "OBS"))
                observations.append(TrackObservation(fid, lid, z))
            else:
                raise ParseError(line_no, f"unknown record tag {tag!r}")
    if camera is None:
        raise ValidationError("missing CAM record")
    tf = TrackFile(
        camera=camera,
        frames=frames,
        landmarks=landmarks,
        observations=observations,
        ground_truth=ground_truth,
        version=version if version is not None else FORMAT_VERSION,
    )
    validate_trackfile(tf)
    return tf


def validate_trackfile(tf: TrackFile) -> dict:
    """Check referential invariants and return a summary: counts and mean
    track length."""
    if not tf.frames:
        raise ValidationError("no FRAME records")
    seen = set()
    track_len: dict[int, int] = {}
    for o in tf.observations:
        if o.frame_id not in tf.frames:
            raise ValidationError(f"observation references unknown frame {o.frame_id}")
        if o.lm_id not in tf.landmarks:
            raise ValidationError(f"observation references unknown landmark {o.lm_id}")
        pair = (o.frame_id, o.lm_id)
        if pair in seen:
            raise ValidationError(f"duplicate observation of frame {pair[0]}, landmark {pair[1]}")
        seen.add(pair)
        track_len[o.lm_id] = track_len.get(o.lm_id, 0) + 1
    for fid in tf.ground_truth:
        if fid not in tf.frames:
            raise ValidationError(f"ground truth references unknown frame {fid}")
    mean_track = float(np.mean(list(track_len.values()))) if track_len else 0.0
    return {
        "frames": len(tf.frames),
        "landmarks": len(tf.landmarks),
        "observations": len(tf.observations),
        "ground_truth": len(tf.ground_truth),
        "mean_track_length": mean_track,
    }
