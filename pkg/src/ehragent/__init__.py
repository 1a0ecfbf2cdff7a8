"""ehragent: answer natural-language questions over multi-table EHR data.

An LLM planner writes small Python plans against six database tools, a
sandboxed executor runs them, and a debugging loop refines the plan from
structured error traces until an answer is produced or the step budget
runs out.
"""

__version__ = "0.1.0"
