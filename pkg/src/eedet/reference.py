"""Published cost/latency reference rows and the checks that reproduce them from the cost model."""
from __future__ import annotations

from .cost import LatencyModel, average_macs, estimate_latency, exceeds_static, savings
from .tpe import objective_J

MEGA = 1e6
CLOCK_HZ = 160e6

# full-width static detector and its early-exit variant (MMACs)
STATIC_MACS = 534 * MEGA
EE_FULL_MACS = 539 * MEGA
EE_EXIT_MACS = 230 * MEGA
EE_SKIP = 0.398
EE_AVG_MACS = 414 * MEGA

# shallowest placement: skip rate and average cost above the static cost
SHALLOW_AVG_MACS = 708 * MEGA

# static detectors at three widths: (MMACs, MAC/cycle, latency ms, FPS)
LATENCY_ROWS = {
    "static-0.5": (193, 4.14, 285.3, 3.50),
    "static-0.75": (358, 4.22, 523.6, 1.91),
    "static-1.0": (534, 4.96, 666.7, 1.50),
}

OBJECTIVE_INPUTS = (0.591, 0.569, 0.944)
OBJECTIVE_VALUE = 0.3175


def _check(name, value, target, tol, rel=True):
    err = abs(value - target) / abs(target) if rel else abs(value - target)
    return {"name": name, "value": value, "target": target, "tolerance": tol,
            "relative": rel, "error": err, "passed": bool(err <= tol)}


def cost_checks():
    out = [_check("avg_macs_stage4", average_macs(EE_FULL_MACS, EE_EXIT_MACS, EE_SKIP), EE_AVG_MACS, 0.01),
           _check("savings_stage4", savings(STATIC_MACS, EE_EXIT_MACS), 0.569, 1e-3, rel=False)]
    # net saving of the shallow placement against the static detector
    s_shallow = savings(STATIC_MACS, SHALLOW_AVG_MACS)
    flagged = exceeds_static(SHALLOW_AVG_MACS, STATIC_MACS)
    out.append({"name": "shallow_exit_overhead", "value": {"S": s_shallow, "flagged": flagged},
                "target": "S < 0 and avg 708M flagged over 534M", "passed": bool(s_shallow < 0 and flagged)})
    return out


def latency_checks():
    out = []
    for name, (mmacs, eff, ms, fps) in LATENCY_ROWS.items():
        sec, f = estimate_latency(mmacs * MEGA, LatencyModel(eff, CLOCK_HZ))
        out.append(_check(f"latency_{name}", sec * 1e3, ms, 0.025))
        out.append(_check(f"fps_{name}", f, fps, 0.025))
    return out


def objective_checks():
    return [_check("objective_stage4", objective_J(*OBJECTIVE_INPUTS), OBJECTIVE_VALUE, 1e-4, rel=False)]


def reference_checks():
    return cost_checks() + latency_checks() + objective_checks()
