"""Reported FCN accuracies used as fixtures: (dataset, accuracy without CSA,
accuracy with CSA, reported improvement in percent)."""

FCN_MTS_ROWS = [
    ("ArticularyWordRecognition", 0.980, 0.982, 0.204),
    ("BasicMotions", 0.968, 0.966, -0.207),
    ("CharacterTrajectories", 0.990, 0.990, 0.000),
    ("Cricket", 0.910, 0.910, 0.000),
    ("DuckDuckGeese", 0.740, 0.766, 3.514),
    ("EigenWorms", 0.544, 0.552, 1.471),
    ("Epilepsy", 0.794, 0.842, 6.045),
    ("EthanolConcentration", 0.624, 0.658, 5.449),
    ("FaceDetection", 0.562, 0.562, 0.000),
    ("FingerMovements", 0.648, 0.656, 1.235),
    ("HandMovementDirection", 0.468, 0.488, 4.274),
    ("Handwriting", 0.284, 0.288, 1.408),
    ("Heartbeat", 0.812, 0.818, 0.739),
    ("InsectWingbeat", 0.108, 0.138, 27.778),
    ("JapaneseVowels", 0.882, 0.890, 0.907),
    ("LSST", 0.444, 0.456, 2.703),
    ("Libras", 0.902, 0.906, 0.443),
    ("MotorImagery", 0.640, 0.648, 1.250),
    ("NATOPS", 0.886, 0.898, 1.354),
    ("PEMS-SF", 0.930, 0.946, 1.720),
    ("PenDigits", 0.984, 0.982, -0.203),
    ("Phoneme", 0.088, 0.092, 4.545),
    ("RacketSports", 0.748, 0.774, 3.476),
    ("SelfRegulationSCP1", 0.872, 0.874, 0.229),
    ("SelfRegulationSCP2", 0.568, 0.586, 3.169),
    ("SpokenArabicDigits", 0.974, 0.982, 0.821),
    ("StandWalkJump", 0.400, 0.400, 0.000),
    ("UWaveGestureLibrary", 0.624, 0.618, -0.962),
]

# (significantly better, better but not significantly, cases) per backbone
REPORTED_TALLIES = {
    "FCN": (3, 18, 28),
    "MLSTM": (2, 20, 28),
    "MLSTM-FCN": (4, 17, 28),
    "TapNet": (5, 8, 27),
    "CNN-ATN": (1, 10, 20),
}
REPORTED_TALLY_SUM = (15, 73, 131)
