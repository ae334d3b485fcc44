"""Dataset ingestion, experiment orchestration and the command line."""
