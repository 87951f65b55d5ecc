"""Smoke test for the mrmtl_py extension module.

Build and install the module first, e.g.

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math
import tempfile

import mrmtl_py as m


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok   {what}")


def main():
    s = m.normalize_power([3.0, 4.0])
    check(abs(s[0] - 0.848528137423857) < 1e-9 and abs(s[1] - 1.131370849898476) < 1e-9, "normalize_power([3, 4])")
    check(abs(m.delta_star(0.8206, 0.6463) - 0.73345) < 1e-12, "delta_star on reference means")

    stats = m.calibrate_from([0.9, 0.8, 0.4, 0.6], [True, True, False, False], 10)
    check(abs(stats["delta_star"] - 0.675) < 1e-12, "calibrate_from midpoint")

    chan = m.ChannelConfig("awgn", 10.0, 0)
    check(abs(chan.noise_variance() - 0.1) < 1e-15, "noise variance at 10 dB")
    r = m.ChannelConfig("awgn", math.inf, 0).transmit([2.0, 2.0], 1)
    check(all(abs(x - 1.0) < 1e-9 for x in r), "noiseless channel is identity after normalization")

    data = m.Dataset.synthetic(3, 5, 0)
    check((data.train_len, data.test_len) == (12, 3), "synthetic split sizes")
    img, label = data.sample(0)
    check(len(img) == 3072 and 0 <= label < 3, "sample shape")

    model = m.MrmtlModel(2, 0.5, 1, 3)
    traces0 = model.run_protocol(data, 0.0, chan, 7)
    traces1 = model.run_protocol(data, m.ALWAYS_ESCALATE, chan, 7)
    a1, a2 = model.evaluate(data, chan, 7)
    acc0 = sum(t["final_pred"] == t["true_label"] for t in traces0) / len(traces0)
    acc1 = sum(t["final_pred"] == t["true_label"] for t in traces1) / len(traces1)
    check(acc0 == a1 and acc1 == a2, "protocol endpoints equal head accuracies")
    check(all(t["delay"] == 2 for t in traces0) and all(t["delay"] == 4 for t in traces1), "endpoint delays")

    rows = model.sweep(data, [0.0, 0.5, 1.01], chan, 7)
    delays = [r["avg_delay"] for r in rows]
    check(delays == sorted(delays), "sweep delay non-decreasing")

    with tempfile.TemporaryDirectory() as out:
        code = m.run_cli(["train", "--desk-scale", "--epochs", "0", "--out", out])
        check(code == 0, "cli train with zero epochs")
        check(m.run_cli(["evaluate", "--desk-scale", "--delta", "7", "--out", out]) == 2, "cli rejects delta 7")

    print("all smoke checks passed")


if __name__ == "__main__":
    main()
