# Tests for the WiFlow pipeline
