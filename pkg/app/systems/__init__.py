# Dynamics library and benchmark systems
