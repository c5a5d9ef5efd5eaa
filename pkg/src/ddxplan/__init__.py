"""Two-phase conversational diagnosis planners with a simulated-dialogue harness.

The screening phase asks symptom questions with an RL-trained inquiry policy
and ranks candidate diseases with a supervised classifier; the differential
phase confirms or excludes a suspected disease by interpreting a
decision-procedure graph. Everything runs against synthetic patient cohorts
through a pluggable question/answer channel.
"""

__version__ = "0.1.0"

from ._core import BACKEND

__all__ = ["BACKEND", "__version__"]
