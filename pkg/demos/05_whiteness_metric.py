"""What the whiteness metric rewards and how it differs from RMSE.

Whiteness is the RMS angular velocity of a steering series (deg/s): jitter
shows up even when RMSE is small, and a smooth-but-biased series can score
better whiteness than a jittery unbiased one. Three exhibits:
  1. the analytic value for a sampled sinusoid vs. the measured one,
  2. truth vs. truth+noise vs. lagged-smooth predictions of one series,
  3. sensitivity: whiteness responds to noise amplitude, RMSE to bias.

Run: python demos/05_whiteness_metric.py
"""

import numpy as np

from tsnet.metrics import instantaneous_whiteness, rmse, whiteness


def sampled_sine(amp, freq_hz, dt, n):
    t = np.arange(n) * dt
    return amp * np.sin(2 * np.pi * freq_hz * t)


def exhibit_analytic():
    amp, freq, dt, n = 5.0, 0.8, 0.1, 4000
    series = sampled_sine(amp, freq, dt, n)
    # First differences of a sampled sinusoid have RMS
    # amp * 2 sin(pi f dt) / sqrt(2); dividing by dt gives deg/s.
    expect = amp * 2 * np.sin(np.pi * freq * dt) / np.sqrt(2) / dt
    got = whiteness(series, dt)
    print("sinusoid amp=%g freq=%gHz: whiteness %.4f vs analytic %.4f "
          "(%.3f%% off)" % (amp, freq, got, expect,
                            100 * abs(got - expect) / expect))


def exhibit_three_predictors():
    rng = np.random.Generator(np.random.PCG64(0))
    dt = 0.1
    truth = sampled_sine(5.0, 0.5, dt, 1200)
    noisy = truth + rng.normal(0.0, 0.8, truth.size)
    lagged = np.roll(truth, 3)  # smooth but late by 0.3 s
    lagged[:3] = truth[:3]
    print("\n%-18s %8s %10s" % ("series", "rmse", "whiteness"))
    for name, pred in (("truth", truth), ("truth+noise", noisy),
                       ("lagged smooth", lagged)):
        print("%-18s %8.3f %10.3f"
              % (name, rmse(pred, truth), whiteness(pred, dt)))
    print("noise barely moves rmse but multiplies whiteness; "
          "lag does the opposite")


def exhibit_instantaneous():
    dt = 0.1
    truth = sampled_sine(5.0, 0.5, dt, 400)
    burst = truth.copy()
    burst[200:210] += np.array([3, -3] * 5, dtype=np.float64)
    inst = instantaneous_whiteness(burst, dt)  # squared deg/s per step
    window = slice(195, 215)
    print("\njitter burst at samples 200..209: global whiteness %.2f, "
          "instantaneous peak %.1f deg/s (at step %d)"
          % (whiteness(burst, dt), np.sqrt(inst[window].max()),
             195 + int(np.argmax(inst[window]))))


def main():
    exhibit_analytic()
    exhibit_three_predictors()
    exhibit_instantaneous()


if __name__ == "__main__":
    main()
