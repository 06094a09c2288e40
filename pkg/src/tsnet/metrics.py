"""Accuracy and smoothness metrics, plus the report/CSV serializers.

Whiteness is the RMS of the finite-difference derivative of the steering
series: sqrt(mean(((P[i+1]-P[i])/dt)^2)) in deg/s. Low whiteness means smooth
actuation; the human reference on comparable footage is 4.36 deg/s.
"""

import json

import numpy as np

__all__ = [
    "HUMAN_WHITENESS_REFERENCE", "rmse", "whiteness",
    "instantaneous_whiteness", "EvalReport", "evaluate",
    "write_report_json", "write_scatter_csv", "write_comparison_csv",
]

HUMAN_WHITENESS_REFERENCE = 4.36

SCATTER_HEADER = "t,angle_pred_deg,angle_true_deg,inst_whiteness"
COMPARISON_HEADER = "model,rmse_deg,whiteness"


def _series(x, name):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ValueError("%s must be 1-d, got shape %s" % (name, a.shape))
    return a


def rmse(pred, true):
    """Root mean squared error between two equal-length angle series."""
    p, t = _series(pred, "pred"), _series(true, "true")
    if p.shape != t.shape:
        raise ValueError("rmse length mismatch: %d vs %d" % (p.size, t.size))
    if p.size == 0:
        raise ValueError("rmse over empty series")
    d = p - t
    return float(np.sqrt(np.mean(d * d)))


def whiteness(angles, dt):
    """RMS finite-difference derivative of a steering series, deg/s."""
    a = _series(angles, "angles")
    if a.size < 2:
        raise ValueError("whiteness needs at least 2 samples, got %d" % a.size)
    if dt <= 0:
        raise ValueError("whiteness dt must be positive, got %r" % (dt,))
    d = np.diff(a) / dt
    return float(np.sqrt(np.mean(d * d)))


def instantaneous_whiteness(angles, dt):
    """Per-step squared derivative, length n-1; mean equals whiteness**2."""
    a = _series(angles, "angles")
    if a.size < 2:
        raise ValueError("whiteness needs at least 2 samples, got %d" % a.size)
    if dt <= 0:
        raise ValueError("whiteness dt must be positive, got %r" % (dt,))
    d = np.diff(a) / dt
    return d * d


class EvalReport:
    """Metrics for one model on one dataset; serializes to stable JSON."""

    def __init__(self, model, n_samples, rmse_deg, whiteness_pred,
                 whiteness_true):
        self.model = model
        self.n_samples = int(n_samples)
        self.rmse_deg = float(rmse_deg)
        self.whiteness_pred = float(whiteness_pred)
        self.whiteness_true = float(whiteness_true)
        self.human_reference = HUMAN_WHITENESS_REFERENCE

    def to_dict(self):
        return {"model": self.model,
                "n_samples": self.n_samples,
                "rmse_deg": self.rmse_deg,
                "whiteness_pred": self.whiteness_pred,
                "whiteness_true": self.whiteness_true,
                "human_whiteness_reference": self.human_reference}

    def __repr__(self):
        return ("EvalReport(model=%r, rmse_deg=%.4f, whiteness_pred=%.4f)"
                % (self.model, self.rmse_deg, self.whiteness_pred))


def evaluate(model_name, pred, true, dt):
    p, t = _series(pred, "pred"), _series(true, "true")
    return EvalReport(model_name, p.size, rmse(p, t),
                      whiteness(p, dt), whiteness(t, dt))


def write_report_json(report, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_scatter_csv(path, timestamps, pred, true, dt):
    """Per-step trace: n-1 rows, one per finite-difference transition.

    Row i covers the step ending at sample i+1: its timestamp, predicted and
    true angle there, and the squared derivative of the prediction over the
    step.
    """
    ts = _series(timestamps, "timestamps")
    p, t = _series(pred, "pred"), _series(true, "true")
    if not ts.size == p.size == t.size:
        raise ValueError("scatter series lengths differ: %d, %d, %d"
                         % (ts.size, p.size, t.size))
    inst = instantaneous_whiteness(p, dt)
    with open(path, "w") as fh:
        fh.write(SCATTER_HEADER + "\n")
        for i in range(1, ts.size):
            fh.write("%s,%s,%s,%s\n" % (repr(float(ts[i])), repr(float(p[i])),
                                        repr(float(t[i])), repr(float(inst[i - 1]))))


def write_comparison_csv(path, reports):
    """Side-by-side model table: model,rmse_deg,whiteness."""
    with open(path, "w") as fh:
        fh.write(COMPARISON_HEADER + "\n")
        for r in reports:
            fh.write("%s,%s,%s\n" % (r.model, repr(r.rmse_deg),
                                     repr(r.whiteness_pred)))
