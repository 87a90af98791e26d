"""Dynamic point removal for LiDAR maps with binary-encoded occupancy matrices."""
