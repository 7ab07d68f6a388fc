# Rollback simulator
