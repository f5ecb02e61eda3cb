//! Training drivers (placeholder).
