"""File formats: IMU CSV, calibration/tracks/estimate JSON, result CSVs.

* IMU stream: CSV with header ``t,wx,wy,wz,ax,ay,az`` (SI units, one row per
  sample, uniform rate).
* Rig calibration: JSON object whose fields mirror ``RigCalibration``.
* Tracks: JSON ``{"pairing": <mode>, "tracks": [{"track_id", "observations":
  [{"cam_id", "frame", "row", "u": [x, y]}, ...]}, ...]}``.
* Estimates: JSON objects ``{"method", "v0", "g0", "cov" (row-major 36 or
  null), "sigma_hat", "iterations", "converged"}``.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .estimators import InitEstimate
from .geometry import ImuStream, Observation, RigCalibration
from .system import Track
from .validation import FileFormatError

IMU_HEADER = ["t", "wx", "wy", "wz", "ax", "ay", "az"]


# ---------------------------------------------------------------------------
# IMU CSV
# ---------------------------------------------------------------------------

def save_imu_csv(stream: ImuStream, path) -> None:
    t = stream.t0 + np.arange(len(stream)) * stream.dt
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMU_HEADER)
        for k in range(len(stream)):
            w.writerow([f"{t[k]:.9f}"]
                       + [f"{v:.17g}" for v in stream.omega[k]]
                       + [f"{v:.17g}" for v in stream.accel[k]])


def load_imu_csv(path) -> ImuStream:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != IMU_HEADER:
            raise FileFormatError(f"{path}: line 1: expected header {','.join(IMU_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 7:
                raise FileFormatError(f"{path}: line {lineno}: expected 7 columns, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise FileFormatError(f"{path}: line {lineno}: {exc}") from exc
    if len(rows) < 2:
        raise FileFormatError(f"{path}: need at least 2 IMU samples")
    arr = np.asarray(rows)
    dts = np.diff(arr[:, 0])
    dt = float(np.median(dts))
    if dt <= 0 or np.any(np.abs(dts - dt) > 1e-6 * max(dt, 1.0) + 1e-9):
        raise FileFormatError(f"{path}: timestamps are not uniformly spaced")
    return ImuStream(arr[:, 1:4], arr[:, 4:7], dt, t0=float(arr[0, 0]))


# ---------------------------------------------------------------------------
# Calibration JSON
# ---------------------------------------------------------------------------

def save_calibration(calib: RigCalibration, path) -> None:
    doc = {
        "K": calib.K.tolist(),
        "R_cam_imu": calib.R_cam_imu.tolist(),
        "t_cam_imu": calib.t_cam_imu.tolist(),
        "readout_per_line": calib.readout_per_line,
        "image_height": calib.image_height,
        "image_width": calib.image_width,
        "fps": calib.fps,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def _load_json(path) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FileFormatError(
                f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def load_calibration(path) -> RigCalibration:
    doc = _load_json(path)
    try:
        return RigCalibration(
            K=np.asarray(doc["K"], dtype=float),
            R_cam_imu=np.asarray(doc["R_cam_imu"], dtype=float),
            t_cam_imu=np.asarray(doc["t_cam_imu"], dtype=float),
            readout_per_line=float(doc["readout_per_line"]),
            image_height=int(doc["image_height"]),
            image_width=int(doc.get("image_width", 0)),
            fps=float(doc["fps"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise FileFormatError(f"{path}: invalid calibration: {exc}") from exc


# ---------------------------------------------------------------------------
# Tracks JSON
# ---------------------------------------------------------------------------

def save_tracks(tracks, pairing: str, path) -> None:
    doc = {"pairing": pairing, "tracks": [
        {"track_id": tr.track_id,
         "observations": [
             {"cam_id": o.cam_id, "frame": o.frame, "row": o.row,
              "u": [o.u[0], o.u[1]]} for o in tr.observations]}
        for tr in tracks]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_tracks(path):
    """Returns (tracks tuple, pairing mode string)."""
    doc = _load_json(path)
    try:
        pairing = doc["pairing"]
        tracks = []
        for tr in doc["tracks"]:
            obs = tuple(
                Observation(cam_id=int(o["cam_id"]), frame=int(o["frame"]),
                            row=float(o["row"]),
                            u=np.array([float(o["u"][0]), float(o["u"][1]), 1.0]))
                for o in tr["observations"])
            tracks.append(Track(track_id=int(tr["track_id"]), observations=obs))
    except (KeyError, ValueError, TypeError, IndexError) as exc:
        raise FileFormatError(f"{path}: invalid tracks file: {exc}") from exc
    return tuple(tracks), pairing


# ---------------------------------------------------------------------------
# Estimates and ground truth JSON
# ---------------------------------------------------------------------------

def estimate_to_dict(est: InitEstimate) -> dict:
    doc = {
        "method": est.method,
        "v0": est.v0.tolist(),
        "g0": est.g0.tolist(),
        "cov": None if est.cov is None else est.cov.ravel().tolist(),
        "sigma_hat": est.sigma_hat,
        "iterations": est.iterations,
        "converged": bool(est.converged),
    }
    if est.accel_bias is not None:
        doc["accel_bias"] = est.accel_bias.tolist()
    if est.gyro_bias is not None:
        doc["gyro_bias"] = est.gyro_bias.tolist()
    return doc


def save_estimates(estimates, path) -> None:
    docs = [estimate_to_dict(e) for e in estimates]
    with open(path, "w") as fh:
        json.dump(docs if len(docs) != 1 else docs[0], fh, indent=2)


def load_estimates(path):
    doc = _load_json(path)
    docs = doc if isinstance(doc, list) else [doc]
    out = []
    for d in docs:
        cov = d.get("cov")
        out.append(InitEstimate(
            method=d["method"], v0=np.asarray(d["v0"]), g0=np.asarray(d["g0"]),
            iterations=int(d["iterations"]), converged=bool(d["converged"]),
            cov=None if cov is None else np.asarray(cov, dtype=float).reshape(6, 6),
            sigma_hat=d.get("sigma_hat")))
    return out


def save_ground_truth(v0, g0, path, extra: dict | None = None) -> None:
    doc = {"v0": list(map(float, v0)), "g0": list(map(float, g0))}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def load_ground_truth(path):
    doc = _load_json(path)
    return np.asarray(doc["v0"], dtype=float), np.asarray(doc["g0"], dtype=float)


# ---------------------------------------------------------------------------
# Benchmark result CSVs
# ---------------------------------------------------------------------------

TRIAL_COLUMNS = ["sigma", "window", "trial", "method", "eps_v", "eps_g",
                 "iters", "sigma_hat", "pred_std_v", "pred_std_g"]


def write_trial_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRIAL_COLUMNS)
        for r in rows:
            if r.pred_var is None:
                psv = psg = float("nan")
            else:
                psv = float(np.sqrt(np.mean(r.pred_var[:3])))
                psg = float(np.sqrt(np.mean(r.pred_var[3:6])))
            w.writerow([r.sigma, r.window, r.trial, r.method,
                        f"{r.eps_v:.9g}", f"{r.eps_g:.9g}", r.iterations,
                        "" if r.sigma_hat is None else f"{r.sigma_hat:.9g}",
                        f"{psv:.9g}", f"{psg:.9g}"])


def write_aggregate_csv(aggregate: dict, path) -> None:
    cols = ["sigma", "method", "n", "n_failed", "mean_eps_v", "std_eps_v",
            "mean_eps_g", "std_eps_g", "median_sigma_hat", "mean_iterations",
            "median_iterations", "frac_converged", "pred_std_v", "pred_std_g",
            "emp_std_v", "emp_std_g"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for (sigma, method), st in sorted(aggregate.items()):
            if st.get("n", 0) == 0:
                w.writerow([sigma, method, 0, st.get("n_failed", 0)] + [""] * 12)
                continue
            w.writerow([
                sigma, method, st["n"], st["n_failed"],
                f"{st['mean_eps_v']:.9g}", f"{st['std_eps_v']:.9g}",
                f"{st['mean_eps_g']:.9g}", f"{st['std_eps_g']:.9g}",
                f"{st['median_sigma_hat']:.9g}", f"{st['mean_iterations']:.4g}",
                f"{st['median_iterations']:.4g}", f"{st['frac_converged']:.4g}",
                f"{float(np.sqrt(np.mean(st['pred_std'][:3] ** 2))):.9g}",
                f"{float(np.sqrt(np.mean(st['pred_std'][3:6] ** 2))):.9g}",
                f"{float(np.sqrt(np.mean(st['emp_std'][:3] ** 2))):.9g}",
                f"{float(np.sqrt(np.mean(st['emp_std'][3:6] ** 2))):.9g}",
            ])


def write_plotdata_csv(aggregate: dict, methods, path) -> None:
    """Wide gnuplot-friendly layout: one row per sigma, mean/std per method."""
    sigmas = sorted({s for s, _ in aggregate})
    header = ["sigma"]
    for m in methods:
        header += [f"{m}_eps_v_mean", f"{m}_eps_v_std",
                   f"{m}_eps_g_mean", f"{m}_eps_g_std"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in sigmas:
            row = [s]
            for m in methods:
                st = aggregate.get((s, m), {})
                if st.get("n", 0):
                    row += [f"{st['mean_eps_v']:.9g}", f"{st['std_eps_v']:.9g}",
                            f"{st['mean_eps_g']:.9g}", f"{st['std_eps_g']:.9g}"]
                else:
                    row += ["", "", "", ""]
            w.writerow(row)
