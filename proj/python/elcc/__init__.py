"""Case-control logistic regression with external covariate summaries.

The heavy lifting lives in the compiled extension; this wrapper adds
dict-returning conveniences for the report documents.
"""

import json as _json

from ._elcc import *  # noqa: F401,F403
from ._elcc import __version__  # noqa: F401
from ._elcc import _analyze_real_json, _mc_report_json


def analyze_real(config):
    """Run the split-sample protocol on a real dataset; returns a dict."""
    return _json.loads(_analyze_real_json(config))


def mc_report(report, scheme):
    """Monte Carlo report document as a dict."""
    return _json.loads(_mc_report_json(report, scheme))
