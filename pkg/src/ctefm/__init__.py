"""Zero-shot voice conversion: timbre-ensemble conditioning + OT conditional flow matching."""
