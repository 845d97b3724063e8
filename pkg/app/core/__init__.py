# Settings, errors, logging and seeding
