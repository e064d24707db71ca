"""Static figures from the solver's on-disk artifacts.

The solver writes ``summary.json``, ``series.csv``, raw field dumps under
``fields/``, and probe reports under ``probes/``; this package reads those
documented schemas -- and nothing else -- and renders four figure kinds:

* ``decay``    weighted sup-norm deviation history on a log axis, with the
  fitted exponential from the summary's decay_fit block overlaid when
  present;
* ``moments``  conserved-moment and thermostat histories;
* ``slice``    mid-plane slice of the stationary state minus the unit
  Maxwellian;
* ``probes``   tail-smallness ratios per (weight, cutoff) sample plus the
  scalar probe constants.

Nothing here recomputes solver physics; the only arithmetic is display
completion (the intercept of the fitted line, the closed-form Maxwellian
reference for the slice).  Rendering never mutates inputs.
"""

from .figures import FigureError, PlotSpec, render

__all__ = ["FigureError", "PlotSpec", "render"]
