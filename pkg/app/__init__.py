# Inverse dynamic games
