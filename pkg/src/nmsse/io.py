"""CSV writers for trajectories, density matrices and histograms (17 significant digits)."""

import csv

import numpy as np


def _fmt(x):
    return f"{x:.17g}"


def write_trajectory_csv(path, times, states, stderr=None):
    """Columns ``t``, ``re_j``, ``im_j`` for each component, then ``stderr_j``."""
    states = np.asarray(states)
    d = states.shape[1]
    header = ["t"]
    for j in range(d):
        header += [f"re_{j}", f"im_{j}"]
    if stderr is not None:
        header += [f"stderr_{j}" for j in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for m, t in enumerate(times):
            row = [_fmt(t)]
            for v in states[m]:
                row += [_fmt(v.real), _fmt(v.imag)]
            if stderr is not None:
                row += [_fmt(s) for s in stderr[m]]
            w.writerow(row)


def read_trajectory_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    d = sum(h.startswith("re_") for h in header)
    states = data[:, 1:1 + 2 * d:2] + 1j * data[:, 2:2 + 2 * d:2]
    stderr = data[:, 1 + 2 * d:] if len(header) > 1 + 2 * d else None
    return data[:, 0], states, stderr


def write_bands_csv(path, times, samples):
    """Empirical 50% and 85% bands of repeated estimates, real and imaginary parts.

    ``samples`` has shape ``(R, M, d)``.
    """
    qs = [7.5, 25.0, 75.0, 92.5]
    d = samples.shape[2]
    header = ["t"]
    for j in range(d):
        for part in ("re", "im"):
            header += [f"{part}_{j}_q{q:g}" for q in qs]
    parts = {"re": np.percentile(samples.real, qs, axis=0), "im": np.percentile(samples.imag, qs, axis=0)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for m, t in enumerate(times):
            row = [_fmt(t)]
            for j in range(d):
                for part in ("re", "im"):
                    row += [_fmt(parts[part][k, m, j]) for k in range(len(qs))]
            w.writerow(row)


def write_density_csv(path, rho, stderr, exact=None):
    d = rho.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["j", "k", "re", "im", "stderr"]
        if exact is not None:
            header += ["exact_re", "exact_im"]
        w.writerow(header)
        for j in range(d):
            for k in range(d):
                row = [j, k, _fmt(rho[j, k].real), _fmt(rho[j, k].imag), _fmt(stderr[j, k])]
                if exact is not None:
                    row += [_fmt(exact[j, k].real), _fmt(exact[j, k].imag)]
                w.writerow(row)


def write_histogram_csv(path, edges, density):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "density"])
        for lo, hi, p in zip(edges[:-1], edges[1:], density):
            w.writerow([_fmt(lo), _fmt(hi), _fmt(p)])


def read_coupling_csv(path):
    """Tabulated couplings: ``omega`` then ``re``/``im`` columns per channel pair ``(k, l)``.

    Returns ``(omega, kappa)`` with ``kappa`` of shape ``(n, n, W)``.
    """
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    omega = data[:, 0]
    pairs = (data.shape[1] - 1) // 2
    n = int(round(np.sqrt(pairs)))
    if n * n != pairs or data.shape[1] != 1 + 2 * pairs:
        raise ValueError(f"{path}: expected omega plus re/im columns for n*n channel pairs")
    vals = data[:, 1::2] + 1j * data[:, 2::2]
    return omega, vals.T.reshape(n, n, -1)
