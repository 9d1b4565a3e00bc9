"""Published split tables for the WomenSports protocol and the companion datasets."""
from rpca.errors import ConfigurationError


# class name → (train, test) under the 5% train / 95% test protocol.
# The same train counts are mirrored for validation in the 5/5/90 protocol.
WOMENSPORTS_COUNTS = {
    "Archery": (30, 574),
    "Artistic_Swimming": (30, 553),
    "Badminton": (32, 625),
    "Baseball": (30, 571),
    "Basketball": (40, 757),
    "Bobsleigh": (32, 608),
    "Boxing": (35, 648),
    "Canoeing": (33, 646),
    "Cheerleading": (32, 611),
    "Cricket": (35, 667),
    "Curling": (30, 583),
    "Cycling": (32, 611),
    "Diving": (30, 587),
    "Equestrian": (33, 635),
    "Fencing": (33, 646),
    "Football": (33, 646),
    "Golf": (32, 604),
    "Gymnastic-Beam": (30, 583),
    "Gymnastic-Floor": (33, 635),
    "Hammer-Throw": (33, 635),
    "Handball": (33, 629),
    "High-Jump": (32, 594),
    "Hockey": (36, 691),
    "Ice-Hockey": (36, 691),
    "Javelin": (35, 665),
    "Judo": (40, 708),
    "Kabaddi": (30, 571),
    "Long-Jump": (40, 729),
    "Pole-Vault": (40, 711),
    "Polo": (31, 607),
    "Rowing": (32, 593),
    "Rugby": (35, 657),
    "Sailing": (33, 634),
    "Shooting-Rifle": (32, 592),
    "Skateboarding": (33, 644),
    "Skating": (35, 661),
    "Skiing": (33, 638),
    "Snooker": (32, 591),
    "Sprint-Run": (35, 662),
    "Surfing": (33, 629),
    "Swimming": (33, 640),
    "Table-Tennis": (33, 628),
    "Tennis": (36, 701),
    "UFC": (36, 692),
    "Volleyball": (35, 665),
    "Wall-Climbing": (35, 653),
    "Waterpolo": (33, 634),
    "Weight-Lifting": (33, 631),
    "Wrestling": (33, 646),
    "WWE": (34, 617),
}

WOMENSPORTS_TOTAL_IMAGES = 33504

# dataset → (classes, train, validation, test); None where a split is unused.
DATASET_DISTRIBUTIONS = {
    "womensports": (50, 1676, 1676, 30152),
    "sports100": (100, 500, 500, 13493),
    "sports102": (102, 9278, None, 4320),
    "dance20": (20, 5565, None, 2760),
}

# Uniform per-class training counts for presets without a per-class table.
PER_CLASS_PRESETS = {
    "sports100": 5,
}

COUNT_TABLES = {
    "womensports": {name: train for name, (train, _test) in WOMENSPORTS_COUNTS.items()},
}


def count_table(name: str) -> dict:
    """Per-class training counts for a named preset."""
    try:
        return dict(COUNT_TABLES[name])
    except KeyError:
        raise ConfigurationError(f"No count table named '{name}'; available: {sorted(COUNT_TABLES)}") from None
