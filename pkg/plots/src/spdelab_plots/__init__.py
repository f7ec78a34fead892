"""Publication-style figures from spdelab CSV outputs.

Pure file-to-file transforms: slopes and statistics are read from the
solver's CSVs, never re-fitted, so a figure can never disagree with the
acceptance suite that produced the numbers.
"""

__version__ = "0.1.0"

from .schema import SchemaError, read_csv_columns
from .figures import (FigureSpec, render, plot_convergence, plot_ldp_tail,
                      plot_paths, plot_rate)
