#!/usr/bin/env python3
"""Standalone reference for the M4-convention accuracy metrics.

Computes sMAPE, MASE, Naive2 and OWA for a fixed three-series toy set and
prints the values with enough digits to freeze into tests. Pure Python on
purpose: no shared code with the main implementation.
"""

import math


def smape(pred, truth):
    assert len(pred) == len(truth)
    total = 0.0
    for p, t in zip(pred, truth):
        denom = abs(p) + abs(t)
        if denom > 0.0:
            total += 200.0 * abs(p - t) / denom
    return total / len(pred)


def mase(pred, truth, insample, m):
    assert len(insample) > m
    num = sum(abs(p - t) for p, t in zip(pred, truth)) / len(pred)
    denom = sum(
        abs(insample[t] - insample[t - m]) for t in range(m, len(insample))
    ) / (len(insample) - m)
    if denom == 0.0:
        return math.inf
    return num / denom


def acf(data, k):
    mean = sum(data) / len(data)
    s1 = sum((data[i] - mean) * (data[i - k] - mean) for i in range(k, len(data)))
    s2 = sum((x - mean) ** 2 for x in data)
    return s1 / s2


def seasonality_test(series, m):
    # 90% significance test on the lag-m autocorrelation.
    if m <= 1 or len(series) < 3 * m:
        return False
    s = acf(series, 1)
    for i in range(2, m):
        s += acf(series, i) ** 2
    limit = 1.645 * math.sqrt((1.0 + 2.0 * s) / len(series))
    return abs(acf(series, m)) > limit


def centered_ma(series, m):
    n = len(series)
    ma = [None] * n
    if m % 2 == 1:
        half = (m - 1) // 2
        for t in range(half, n - half):
            ma[t] = sum(series[t - half : t + half + 1]) / m
    else:
        half = m // 2
        for t in range(half, n - half):
            window = 0.5 * series[t - half] + 0.5 * series[t + half]
            window += sum(series[t - half + 1 : t + half])
            ma[t] = window / m
    return ma


def seasonal_indices(series, m):
    if not seasonality_test(series, m):
        return [100.0] * m
    ma = centered_ma(series, m)
    sums = [0.0] * m
    counts = [0] * m
    for t, v in enumerate(ma):
        if v is not None and v != 0.0:
            sums[t % m] += 100.0 * series[t] / v
            counts[t % m] += 1
    si = [sums[k] / counts[k] if counts[k] > 0 else 100.0 for k in range(m)]
    norm = sum(si) / (m * 100.0)
    return [s / norm for s in si]


def naive2(insample, m, horizon):
    si = seasonal_indices(insample, m)
    n = len(insample)
    last = insample[-1] / (si[(n - 1) % m] / 100.0)
    return [last * si[(n + h) % m] / 100.0 for h in range(horizon)]


TOY = [
    # (insample, truth, prediction), all with period m = 4
    (
        [10.0, 12.0, 14.0, 16.0, 11.0, 13.0, 15.0, 17.0,
         12.0, 14.0, 16.0, 18.0, 13.0, 15.0, 17.0, 19.0],
        [14.0, 16.0, 18.0, 20.0],
        [14.5, 15.5, 18.2, 19.7],
    ),
    (
        [100.0, 102.0, 101.0, 103.0, 105.0, 104.0, 106.0, 108.0,
         107.0, 109.0, 111.0, 110.0],
        [112.0, 111.0, 113.0, 115.0],
        [111.0, 112.0, 112.5, 114.0],
    ),
    (
        [5.0, 3.0, 4.0, 6.0, 5.5, 3.5, 4.5, 6.5, 6.0, 4.0, 5.0, 7.0,
         6.5, 4.5, 5.5, 7.5, 7.0, 5.0, 6.0, 8.0],
        [7.5, 5.5, 6.5, 8.5],
        [7.2, 5.8, 6.1, 8.9],
    ),
]

M = 4


def main():
    method_smapes = []
    method_mases = []
    naive2_smapes = []
    naive2_mases = []
    for idx, (insample, truth, pred) in enumerate(TOY):
        n2 = naive2(insample, M, len(truth))
        s_method = smape(pred, truth)
        m_method = mase(pred, truth, insample, M)
        s_n2 = smape(n2, truth)
        m_n2 = mase(n2, truth, insample, M)
        method_smapes.append(s_method)
        method_mases.append(m_method)
        naive2_smapes.append(s_n2)
        naive2_mases.append(m_n2)
        print(f"series {idx}:")
        print(f"  seasonal       = {seasonality_test(insample, M)}")
        print(f"  naive2         = {['%.15f' % v for v in n2]}")
        print(f"  smape          = {s_method:.15f}")
        print(f"  mase           = {m_method:.15f}")
        print(f"  naive2_smape   = {s_n2:.15f}")
        print(f"  naive2_mase    = {m_n2:.15f}")

    avg_s = sum(method_smapes) / len(method_smapes)
    avg_m = sum(method_mases) / len(method_mases)
    avg_s_n2 = sum(naive2_smapes) / len(naive2_smapes)
    avg_m_n2 = sum(naive2_mases) / len(naive2_mases)
    owa = 0.5 * (avg_s / avg_s_n2 + avg_m / avg_m_n2)
    owa_self = 0.5 * (avg_s_n2 / avg_s_n2 + avg_m_n2 / avg_m_n2)
    print("aggregate:")
    print(f"  smape          = {avg_s:.15f}")
    print(f"  mase           = {avg_m:.15f}")
    print(f"  naive2_smape   = {avg_s_n2:.15f}")
    print(f"  naive2_mase    = {avg_m_n2:.15f}")
    print(f"  owa            = {owa:.15f}")
    print(f"  owa_naive2     = {owa_self:.15f}")


if __name__ == "__main__":
    main()
