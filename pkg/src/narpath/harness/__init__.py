"""Scenario generation, pipelines, evaluation and the command-line interface."""
