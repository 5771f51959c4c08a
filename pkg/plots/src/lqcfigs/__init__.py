"""Figure rendering for the mixed-noise LQC benchmark CSV artifacts."""

from .figures import (
    FIGURE_METHODS,
    FIGURES,
    FigureDataError,
    FigureSpec,
    ellipse_points,
    read_csv_columns,
    render,
    spec_for,
)

__version__ = "0.1.0"
