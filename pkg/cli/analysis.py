import numpy as np
import pandas as pd

PLOT_COLUMNS = ['series', 'x', 'y', 'y_stderr']


def series_frame(name: str, x, y, y_stderr=None) -> pd.DataFrame:
    """One plot series; a missing standard error is written as 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"series '{name}': x {x.shape} and y {y.shape} differ")
    stderr = np.zeros_like(y) if y_stderr is None else np.asarray(y_stderr, dtype=float)
    return pd.DataFrame({'series': name, 'x': x, 'y': y, 'y_stderr': stderr})


def path_series(name: str, times, values) -> pd.DataFrame:
    """Cross-path mean and standard error of an (n_paths, n_nodes) array over t."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    stderr = values.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(values.shape[1])
    return series_frame(name, times, values.mean(axis=0), stderr)


def emit_plot_data(series) -> pd.DataFrame:
    """
    Long-format plot table (series, x, y, y_stderr) from a list of series frames.

    Rows keep the order the series were given in; no plotting happens here.

    Example:
        >>> emit_plot_data([series_frame('bond_curve', [2, 10], [0.99, 0.95])]).columns.tolist()
        ['series', 'x', 'y', 'y_stderr']
    """
    frames = [frame[PLOT_COLUMNS] for frame in series if len(frame)]
    if not frames:
        return pd.DataFrame(columns=PLOT_COLUMNS)
    return pd.concat(frames, ignore_index=True)
