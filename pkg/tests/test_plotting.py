import matplotlib

matplotlib.use('Agg')

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from interaction_flows import plotting  # noqa: E402


def moment_frame() -> pd.DataFrame:
    t = np.linspace(0.0, 1.0, 11)
    return pd.concat(
        [
            pd.DataFrame({'replica': r, 'p': p, 't': t, 'ln_M_p': (p - 1.0) * t})
            for r in (0, 1)
            for p in (1.5, 2.0)
        ],
        ignore_index=True,
    )


def test_plots_are_saved(tmp_path):
    fit = {'p': [1.5, 2.0], 'lambda_p': [0.5, 1.0]}
    paths = [
        plotting.plot_moment_series(moment_frame(), fit=fit, plot_path=tmp_path / 'moments.png'),
        plotting.plot_lyapunov_samples(
            [-1.1, -0.9, -1.0], -1.0, 0.05, reference=-1.0, plot_path=tmp_path / 'lyapunov.png'
        ),
        plotting.plot_clustering(
            pd.DataFrame({'t': [0.0, 1.0], 'gamma': [0.2, 0.0]}),
            plot_path=tmp_path / 'sub' / 'clustering.png',
        ),
        plotting.plot_verdicts(
            pd.DataFrame(
                {
                    'name': ['a', 'b'],
                    'lambda_hat': [-1.0, 0.0],
                    'stderr': [0.0, 0.0],
                    'verdict': ['intermittent', 'not intermittent'],
                }
            ),
            plot_path=tmp_path / 'report.png',
        ),
    ]
    for path in paths:
        assert path.is_file()
        assert path.stat().st_size > 0


def test_figure_returned_without_path():
    fig = plotting.plot_moment_series(moment_frame(), title='moments')
    assert fig.axes[0].get_title() == 'moments'
    assert len(fig.axes[0].get_lines()) == 2
    plt.close(fig)
