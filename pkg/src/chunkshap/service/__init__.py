"""HTTP service wrapping the valuation engine."""
