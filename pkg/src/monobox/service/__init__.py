"""Service layer: operations shared by the HTTP app and the CLI."""
