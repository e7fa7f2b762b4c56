"""Coordination engine for subject-operation-object behaviors.

Subjects perform operations on objects; every attempt is checked against a
three-part policy envelope, recorded in the shared behavior base, and may
trigger further behaviors through the change feed.
"""

__version__ = "0.1.0"
