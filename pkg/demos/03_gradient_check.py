"""Verify every analytic gradient against central finite differences.

Prints the full per-operation table from the self-check suite: each row is
the worst relative error across seeds for one op or model configuration.
All rows must sit below the 1e-6 acceptance threshold.

Run: python demos/03_gradient_check.py
"""

from tsnet.selfcheck import GRADCHECK_THRESHOLD, gradcheck_suite


def main():
    results = gradcheck_suite(eps=1e-6)
    width = max(len(name) for name in results)
    worst = ("", 0.0)
    for name, err in sorted(results.items()):
        flag = "ok" if err <= GRADCHECK_THRESHOLD else "FAIL"
        print("%-*s  %.3e  %s" % (width, name, err, flag))
        if err > worst[1]:
            worst = (name, err)
    print("\n%d checks, worst %.3e at %r, threshold %.0e"
          % (len(results), worst[1], worst[0], GRADCHECK_THRESHOLD))


if __name__ == "__main__":
    main()
