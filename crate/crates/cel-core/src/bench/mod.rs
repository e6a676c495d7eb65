//! Experiment orchestration (in progress).
