"""
Tests for vmscan.

Fixture images are built in memory by the builders in
vmscan.tests.builders, so the suite needs no root access or external
imaging tools.
"""
