# Command-line surface and experiment configuration
