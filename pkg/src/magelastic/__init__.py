"""Incompressible magnetoelasticity: incremental minimization and energetic-solution audits."""
