"""Experiment orchestration: data, synthetic tasks, pipeline runs and reports."""
