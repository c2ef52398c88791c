# File persistence
