"""Standard IEEE 57- and 118-bus test system tables (MATPOWER-style columns).

Bus columns:    bus_i, type(1=PQ,2=PV,3=slack), Pd(MW), Qd(MVAr), Gs(MW), Bs(MVAr), Va(deg)
Gen columns:    bus, Pmax(MW), Vg(p.u.)
Branch columns: fbus, tbus, r, x, b, ratio(0=none), angle(deg)

baseMVA = 100 for both systems.
"""

BASE_MVA = 100.0

# --- IEEE 57 ---------------------------------------------------------------

BUS57 = [
    # bus, type, Pd, Qd, Gs, Bs, Va
    (1, 3, 55.0, 17.0, 0.0, 0.0, 0.0),
    (2, 2, 3.0, 88.0, 0.0, 0.0, 0.0),
    (3, 2, 41.0, 21.0, 0.0, 0.0, 0.0),
    (4, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (5, 1, 13.0, 4.0, 0.0, 0.0, 0.0),
    (6, 2, 75.0, 2.0, 0.0, 0.0, 0.0),
    (7, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (8, 2, 150.0, 22.0, 0.0, 0.0, 0.0),
    (9, 2, 121.0, 26.0, 0.0, 0.0, 0.0),
    (10, 1, 5.0, 2.0, 0.0, 0.0, 0.0),
    (11, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (12, 2, 377.0, 24.0, 0.0, 0.0, 0.0),
    (13, 1, 18.0, 2.3, 0.0, 0.0, 0.0),
    (14, 1, 10.5, 5.3, 0.0, 0.0, 0.0),
    (15, 1, 22.0, 5.0, 0.0, 0.0, 0.0),
    (16, 1, 43.0, 3.0, 0.0, 0.0, 0.0),
    (17, 1, 42.0, 8.0, 0.0, 0.0, 0.0),
    (18, 1, 27.2, 9.8, 0.0, 10.0, 0.0),
    (19, 1, 3.3, 0.6, 0.0, 0.0, 0.0),
    (20, 1, 2.3, 1.0, 0.0, 0.0, 0.0),
    (21, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (22, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (23, 1, 6.3, 2.1, 0.0, 0.0, 0.0),
    (24, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (25, 1, 6.3, 3.2, 0.0, 5.9, 0.0),
    (26, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (27, 1, 9.3, 0.5, 0.0, 0.0, 0.0),
    (28, 1, 4.6, 2.3, 0.0, 0.0, 0.0),
    (29, 1, 17.0, 2.6, 0.0, 0.0, 0.0),
    (30, 1, 3.6, 1.8, 0.0, 0.0, 0.0),
    (31, 1, 5.8, 2.9, 0.0, 0.0, 0.0),
    (32, 1, 1.6, 0.8, 0.0, 0.0, 0.0),
    (33, 1, 3.8, 1.9, 0.0, 0.0, 0.0),
    (34, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (35, 1, 6.0, 3.0, 0.0, 0.0, 0.0),
    (36, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (37, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (38, 1, 14.0, 7.0, 0.0, 0.0, 0.0),
    (39, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (40, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (41, 1, 6.3, 3.0, 0.0, 0.0, 0.0),
    (42, 1, 7.1, 4.4, 0.0, 0.0, 0.0),
    (43, 1, 2.0, 1.0, 0.0, 0.0, 0.0),
    (44, 1, 12.0, 1.8, 0.0, 0.0, 0.0),
    (45, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (46, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (47, 1, 29.7, 11.6, 0.0, 0.0, 0.0),
    (48, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (49, 1, 18.0, 8.5, 0.0, 0.0, 0.0),
    (50, 1, 21.0, 10.5, 0.0, 0.0, 0.0),
    (51, 1, 18.0, 5.3, 0.0, 0.0, 0.0),
    (52, 1, 4.9, 2.2, 0.0, 0.0, 0.0),
    (53, 1, 20.0, 10.0, 0.0, 6.3, 0.0),
    (54, 1, 4.1, 1.4, 0.0, 0.0, 0.0),
    (55, 1, 6.8, 3.4, 0.0, 0.0, 0.0),
    (56, 1, 7.6, 2.2, 0.0, 0.0, 0.0),
    (57, 1, 6.7, 2.0, 0.0, 0.0, 0.0),
]

GEN57 = [
    # bus, Pmax, Vg
    (1, 575.88, 1.040),
    (2, 100.0, 1.010),
    (3, 140.0, 1.010),
    (6, 100.0, 0.980),
    (8, 550.0, 1.005),
    (9, 100.0, 0.980),
    (12, 410.0, 1.015),
]

BRANCH57 = [
    # f, t, r, x, b, ratio, angle
    (1, 2, 0.0083, 0.0280, 0.1290, 0.0, 0.0),
    (2, 3, 0.0298, 0.0850, 0.0818, 0.0, 0.0),
    (3, 4, 0.0112, 0.0366, 0.0380, 0.0, 0.0),
    (4, 5, 0.0625, 0.1320, 0.0258, 0.0, 0.0),
    (4, 6, 0.0430, 0.1480, 0.0348, 0.0, 0.0),
    (6, 7, 0.0200, 0.1020, 0.0276, 0.0, 0.0),
    (6, 8, 0.0339, 0.1730, 0.0470, 0.0, 0.0),
    (8, 9, 0.0099, 0.0505, 0.0548, 0.0, 0.0),
    (9, 10, 0.0369, 0.1679, 0.0440, 0.0, 0.0),
    (9, 11, 0.0258, 0.0848, 0.0218, 0.0, 0.0),
    (9, 12, 0.0648, 0.2950, 0.0772, 0.0, 0.0),
    (9, 13, 0.0481, 0.1580, 0.0406, 0.0, 0.0),
    (13, 14, 0.0132, 0.0434, 0.0110, 0.0, 0.0),
    (13, 15, 0.0269, 0.0869, 0.0230, 0.0, 0.0),
    (1, 15, 0.0178, 0.0910, 0.0988, 0.0, 0.0),
    (1, 16, 0.0454, 0.2060, 0.0546, 0.0, 0.0),
    (1, 17, 0.0238, 0.1080, 0.0286, 0.0, 0.0),
    (3, 15, 0.0162, 0.0530, 0.0544, 0.0, 0.0),
    (4, 18, 0.0, 0.5550, 0.0, 0.970, 0.0),
    (4, 18, 0.0, 0.4300, 0.0, 0.978, 0.0),
    (5, 6, 0.0302, 0.0641, 0.0124, 0.0, 0.0),
    (7, 8, 0.0139, 0.0712, 0.0194, 0.0, 0.0),
    (10, 12, 0.0277, 0.1262, 0.0328, 0.0, 0.0),
    (11, 13, 0.0223, 0.0732, 0.0188, 0.0, 0.0),
    (12, 13, 0.0178, 0.0580, 0.0604, 0.0, 0.0),
    (12, 16, 0.0180, 0.0813, 0.0216, 0.0, 0.0),
    (12, 17, 0.0397, 0.1790, 0.0476, 0.0, 0.0),
    (14, 15, 0.0171, 0.0547, 0.0148, 0.0, 0.0),
    (18, 19, 0.4610, 0.6850, 0.0, 0.0, 0.0),
    (19, 20, 0.2830, 0.4340, 0.0, 0.0, 0.0),
    (21, 20, 0.0, 0.7767, 0.0, 1.043, 0.0),
    (21, 22, 0.0736, 0.1170, 0.0, 0.0, 0.0),
    (22, 23, 0.0099, 0.0152, 0.0, 0.0, 0.0),
    (23, 24, 0.1660, 0.2560, 0.0084, 0.0, 0.0),
    (24, 25, 0.0, 1.1820, 0.0, 1.000, 0.0),
    (24, 25, 0.0, 1.2300, 0.0, 1.000, 0.0),
    (24, 26, 0.0, 0.0473, 0.0, 1.043, 0.0),
    (26, 27, 0.1650, 0.2540, 0.0, 0.0, 0.0),
    (27, 28, 0.0618, 0.0954, 0.0, 0.0, 0.0),
    (28, 29, 0.0418, 0.0587, 0.0, 0.0, 0.0),
    (7, 29, 0.0, 0.0648, 0.0, 0.967, 0.0),
    (25, 30, 0.1350, 0.2020, 0.0, 0.0, 0.0),
    (30, 31, 0.3260, 0.4970, 0.0, 0.0, 0.0),
    (31, 32, 0.5070, 0.7550, 0.0, 0.0, 0.0),
    (32, 33, 0.0392, 0.0360, 0.0, 0.0, 0.0),
    (34, 32, 0.0, 0.9530, 0.0, 0.975, 0.0),
    (34, 35, 0.0520, 0.0780, 0.0032, 0.0, 0.0),
    (35, 36, 0.0430, 0.0537, 0.0016, 0.0, 0.0),
    (36, 37, 0.0290, 0.0366, 0.0, 0.0, 0.0),
    (37, 38, 0.0651, 0.1009, 0.0020, 0.0, 0.0),
    (37, 39, 0.0239, 0.0379, 0.0, 0.0, 0.0),
    (36, 40, 0.0300, 0.0466, 0.0, 0.0, 0.0),
    (22, 38, 0.0192, 0.0295, 0.0, 0.0, 0.0),
    (11, 41, 0.0, 0.7490, 0.0, 0.955, 0.0),
    (41, 42, 0.2070, 0.3520, 0.0, 0.0, 0.0),
    (41, 43, 0.0, 0.4120, 0.0, 0.0, 0.0),
    (38, 44, 0.0289, 0.0585, 0.0020, 0.0, 0.0),
    (15, 45, 0.0, 0.1042, 0.0, 0.955, 0.0),
    (14, 46, 0.0, 0.0735, 0.0, 0.900, 0.0),
    (46, 47, 0.0230, 0.0680, 0.0032, 0.0, 0.0),
    (47, 48, 0.0182, 0.0233, 0.0, 0.0, 0.0),
    (48, 49, 0.0834, 0.1290, 0.0048, 0.0, 0.0),
    (49, 50, 0.0801, 0.1280, 0.0, 0.0, 0.0),
    (50, 51, 0.1386, 0.2200, 0.0, 0.0, 0.0),
    (10, 51, 0.0, 0.0712, 0.0, 0.930, 0.0),
    (13, 49, 0.0, 0.1910, 0.0, 0.895, 0.0),
    (29, 52, 0.1442, 0.1870, 0.0, 0.0, 0.0),
    (52, 53, 0.0762, 0.0984, 0.0, 0.0, 0.0),
    (53, 54, 0.1878, 0.2320, 0.0, 0.0, 0.0),
    (54, 55, 0.1732, 0.2265, 0.0, 0.0, 0.0),
    (11, 43, 0.0, 0.1530, 0.0, 0.958, 0.0),
    (44, 45, 0.0624, 0.1242, 0.0040, 0.0, 0.0),
    (40, 56, 0.0, 1.1950, 0.0, 0.958, 0.0),
    (56, 41, 0.5530, 0.5490, 0.0, 0.0, 0.0),
    (56, 42, 0.2125, 0.3540, 0.0, 0.0, 0.0),
    (39, 57, 0.0, 1.3550, 0.0, 0.980, 0.0),
    (57, 56, 0.1740, 0.2600, 0.0, 0.0, 0.0),
    (38, 49, 0.1150, 0.1770, 0.0030, 0.0, 0.0),
    (38, 48, 0.0312, 0.0482, 0.0, 0.0, 0.0),
    (9, 55, 0.0, 0.1205, 0.0, 0.940, 0.0),
]

# --- IEEE 118 --------------------------------------------------------------

BUS118 = [
    (1, 2, 51.0, 27.0, 0.0, 0.0, 0.0),
    (2, 1, 20.0, 9.0, 0.0, 0.0, 0.0),
    (3, 1, 39.0, 10.0, 0.0, 0.0, 0.0),
    (4, 2, 39.0, 12.0, 0.0, 0.0, 0.0),
    (5, 1, 0.0, 0.0, 0.0, -40.0, 0.0),
    (6, 2, 52.0, 22.0, 0.0, 0.0, 0.0),
    (7, 1, 19.0, 2.0, 0.0, 0.0, 0.0),
    (8, 2, 28.0, 0.0, 0.0, 0.0, 0.0),
    (9, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (10, 2, 0.0, 0.0, 0.0, 0.0, 0.0),
    (11, 1, 70.0, 23.0, 0.0, 0.0, 0.0),
    (12, 2, 47.0, 10.0, 0.0, 0.0, 0.0),
    (13, 1, 34.0, 16.0, 0.0, 0.0, 0.0),
    (14, 1, 14.0, 1.0, 0.0, 0.0, 0.0),
    (15, 2, 90.0, 30.0, 0.0, 0.0, 0.0),
    (16, 1, 25.0, 10.0, 0.0, 0.0, 0.0),
    (17, 1, 11.0, 3.0, 0.0, 0.0, 0.0),
    (18, 2, 60.0, 34.0, 0.0, 0.0, 0.0),
    (19, 2, 45.0, 25.0, 0.0, 0.0, 0.0),
    (20, 1, 18.0, 3.0, 0.0, 0.0, 0.0),
    (21, 1, 14.0, 8.0, 0.0, 0.0, 0.0),
    (22, 1, 10.0, 5.0, 0.0, 0.0, 0.0),
    (23, 1, 7.0, 3.0, 0.0, 0.0, 0.0),
    (24, 2, 13.0, 0.0, 0.0, 0.0, 0.0),
    (25, 2, 0.0, 0.0, 0.0, 0.0, 0.0),
    (26, 2, 0.0, 0.0, 0.0, 0.0, 0.0),
    (27, 2, 71.0, 13.0, 0.0, 0.0, 0.0),
    (28, 1, 17.0, 7.0, 0.0, 0.0, 0.0),
    (29, 1, 24.0, 4.0, 0.0, 0.0, 0.0),
    (30, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (31, 2, 43.0, 27.0, 0.0, 0.0, 0.0),
    (32, 2, 59.0, 23.0, 0.0, 0.0, 0.0),
    (33, 1, 23.0, 9.0, 0.0, 0.0, 0.0),
    (34, 2, 59.0, 26.0, 0.0, 14.0, 0.0),
    (35, 1, 33.0, 9.0, 0.0, 0.0, 0.0),
    (36, 2, 31.0, 17.0, 0.0, 0.0, 0.0),
    (37, 1, 0.0, 0.0, 0.0, -25.0, 0.0),
    (38, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (39, 1, 27.0, 11.0, 0.0, 0.0, 0.0),
    (40, 2, 66.0, 23.0, 0.0, 0.0, 0.0),
    (41, 1, 37.0, 10.0, 0.0, 0.0, 0.0),
    (42, 2, 96.0, 23.0, 0.0, 0.0, 0.0),
    (43, 1, 18.0, 7.0, 0.0, 0.0, 0.0),
    (44, 1, 16.0, 8.0, 0.0, 10.0, 0.0),
    (45, 1, 53.0, 22.0, 0.0, 10.0, 0.0),
    (46, 2, 28.0, 10.0, 0.0, 10.0, 0.0),
    (47, 1, 34.0, 0.0, 0.0, 0.0, 0.0),
    (48, 1, 20.0, 11.0, 0.0, 15.0, 0.0),
    (49, 2, 87.0, 30.0, 0.0, 0.0, 0.0),
    (50, 1, 17.0, 4.0, 0.0, 0.0, 0.0),
    (51, 1, 17.0, 8.0, 0.0, 0.0, 0.0),
    (52, 1, 18.0, 5.0, 0.0, 0.0, 0.0),
    (53, 1, 23.0, 11.0, 0.0, 0.0, 0.0),
    (54, 2, 113.0, 32.0, 0.0, 0.0, 0.0),
    (55, 2, 63.0, 22.0, 0.0, 0.0, 0.0),
    (56, 2, 84.0, 18.0, 0.0, 0.0, 0.0),
    (57, 1, 12.0, 3.0, 0.0, 0.0, 0.0),
    (58, 1, 12.0, 3.0, 0.0, 0.0, 0.0),
    (59, 2, 277.0, 113.0, 0.0, 0.0, 0.0),
    (60, 1, 78.0, 3.0, 0.0, 0.0, 0.0),
    (61, 2, 0.0, 0.0, 0.0, 0.0, 0.0),
    (62, 2, 77.0, 14.0, 0.0, 0.0, 0.0),
    (63, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (64, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (65, 2, 0.0, 0.0, 0.0, 0.0, 0.0),
    (66, 2, 39.0, 18.0, 0.0, 0.0, 0.0),
    (67, 1, 28.0, 7.0, 0.0, 0.0, 0.0),
    (68, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (69, 3, 0.0, 0.0, 0.0, 0.0, 30.0),
    (70, 2, 66.0, 20.0, 0.0, 0.0, 0.0),
    (71, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (72, 2, 12.0, 0.0, 0.0, 0.0, 0.0),
    (73, 2, 6.0, 0.0, 0.0, 0.0, 0.0),
    (74, 2, 68.0, 27.0, 0.0, 12.0, 0.0),
    (75, 1, 47.0, 11.0, 0.0, 0.0, 0.0),
    (76, 2, 68.0, 36.0, 0.0, 0.0, 0.0),
    (77, 2, 61.0, 28.0, 0.0, 12.0, 0.0),
    (78, 1, 71.0, 26.0, 0.0, 0.0, 0.0),
    (79, 1, 39.0, 32.0, 0.0, 20.0, 0.0),
    (80, 2, 130.0, 26.0, 0.0, 0.0, 0.0),
    (81, 1, 0.0, 0.0, 0.0, 0.0, 0.0),
    (82, 1, 54.0, 27.0, 0.0, 20.0, 0.0),
    (83, 1, 20.0, 10.0, 0.0, 10.0, 0.0),
    (84, 1, 11.0, 7.0, 0.0, 0.0, 0.0),
    (85, 2, 24.0, 15.0, 0.0, 0.0, 0.0),
    (86, 1, 21.0, 10.0, 0.0, 0.0, 0.0),
    (87, 2, 0.0, 0.0, 0.0, 0.0, 0.0),
    (88, 1, 48.0, 10.0, 0.0, 0.0, 0.0),
    (89, 2, 0.0, 0.0, 0.0, 0.0, 0.0),
    (90, 2, 163.0, 42.0, 0.0, 0.0, 0.0),
    (91, 2, 10.0, 0.0, 0.0, 0.0, 0.0),
    (92, 2, 65.0, 10.0, 0.0, 0.0, 0.0),
    (93, 1, 12.0, 7.0, 0.0, 0.0, 0.0),
    (94, 1, 30.0, 16.0, 0.0, 0.0, 0.0),
    (95, 1, 42.0, 31.0, 0.0, 0.0, 0.0),
    (96, 1, 38.0, 15.0, 0.0, 0.0, 0.0),
    (97, 1, 15.0, 9.0, 0.0, 0.0, 0.0),
    (98, 1, 34.0, 8.0, 0.0, 0.0, 0.0),
    (99, 2, 42.0, 0.0, 0.0, 0.0, 0.0),
    (100, 2, 37.0, 18.0, 0.0, 0.0, 0.0),
    (101, 1, 22.0, 15.0, 0.0, 0.0, 0.0),
    (102, 1, 5.0, 3.0, 0.0, 0.0, 0.0),
    (103, 2, 23.0, 16.0, 0.0, 0.0, 0.0),
    (104, 2, 38.0, 25.0, 0.0, 0.0, 0.0),
    (105, 2, 31.0, 26.0, 0.0, 20.0, 0.0),
    (106, 1, 43.0, 16.0, 0.0, 0.0, 0.0),
    (107, 2, 50.0, 12.0, 0.0, 6.0, 0.0),
    (108, 1, 2.0, 1.0, 0.0, 0.0, 0.0),
    (109, 1, 8.0, 3.0, 0.0, 0.0, 0.0),
    (110, 2, 39.0, 30.0, 0.0, 6.0, 0.0),
    (111, 2, 0.0, 0.0, 0.0, 0.0, 0.0),
    (112, 2, 68.0, 13.0, 0.0, 0.0, 0.0),
    (113, 2, 6.0, 0.0, 0.0, 0.0, 0.0),
    (114, 1, 8.0, 3.0, 0.0, 0.0, 0.0),
    (115, 1, 22.0, 7.0, 0.0, 0.0, 0.0),
    (116, 2, 184.0, 0.0, 0.0, 0.0, 0.0),
    (117, 1, 20.0, 8.0, 0.0, 0.0, 0.0),
    (118, 1, 33.0, 15.0, 0.0, 0.0, 0.0),
]

GEN118 = [
    (1, 100.0, 0.955),
    (4, 100.0, 0.998),
    (6, 100.0, 0.990),
    (8, 100.0, 1.015),
    (10, 550.0, 1.050),
    (12, 185.0, 0.990),
    (15, 100.0, 0.970),
    (18, 100.0, 0.973),
    (19, 100.0, 0.962),
    (24, 100.0, 0.992),
    (25, 320.0, 1.050),
    (26, 414.0, 1.015),
    (27, 100.0, 0.968),
    (31, 107.0, 0.967),
    (32, 100.0, 0.963),
    (34, 100.0, 0.984),
    (36, 100.0, 0.980),
    (40, 100.0, 0.970),
    (42, 100.0, 0.985),
    (46, 119.0, 1.005),
    (49, 304.0, 1.025),
    (54, 148.0, 0.955),
    (55, 100.0, 0.952),
    (56, 100.0, 0.954),
    (59, 255.0, 0.985),
    (61, 260.0, 0.995),
    (62, 100.0, 0.998),
    (65, 491.0, 1.005),
    (66, 492.0, 1.050),
    (69, 805.2, 1.035),
    (70, 100.0, 0.984),
    (72, 100.0, 0.980),
    (73, 100.0, 0.991),
    (74, 100.0, 0.958),
    (76, 100.0, 0.943),
    (77, 100.0, 1.006),
    (80, 577.0, 1.040),
    (85, 100.0, 0.985),
    (87, 104.0, 1.015),
    (89, 707.0, 1.005),
    (90, 100.0, 0.985),
    (91, 100.0, 0.980),
    (92, 100.0, 0.993),
    (99, 100.0, 1.010),
    (100, 352.0, 1.017),
    (103, 140.0, 1.010),
    (104, 100.0, 0.971),
    (105, 100.0, 0.965),
    (107, 100.0, 0.952),
    (110, 100.0, 0.973),
    (111, 136.0, 0.980),
    (112, 100.0, 0.975),
    (113, 100.0, 0.993),
    (116, 100.0, 1.005),
]

BRANCH118 = [
    (1, 2, 0.0303, 0.0999, 0.0254, 0.0, 0.0),
    (1, 3, 0.0129, 0.0424, 0.01082, 0.0, 0.0),
    (4, 5, 0.00176, 0.00798, 0.0021, 0.0, 0.0),
    (3, 5, 0.0241, 0.108, 0.0284, 0.0, 0.0),
    (5, 6, 0.0119, 0.054, 0.01426, 0.0, 0.0),
    (6, 7, 0.00459, 0.0208, 0.0055, 0.0, 0.0),
    (8, 9, 0.00244, 0.0305, 1.162, 0.0, 0.0),
    (8, 5, 0.0, 0.0267, 0.0, 0.985, 0.0),
    (9, 10, 0.00258, 0.0322, 1.23, 0.0, 0.0),
    (4, 11, 0.0209, 0.0688, 0.01748, 0.0, 0.0),
    (5, 11, 0.0203, 0.0682, 0.01738, 0.0, 0.0),
    (11, 12, 0.00595, 0.0196, 0.00502, 0.0, 0.0),
    (2, 12, 0.0187, 0.0616, 0.01572, 0.0, 0.0),
    (3, 12, 0.0484, 0.16, 0.0406, 0.0, 0.0),
    (7, 12, 0.00862, 0.034, 0.00874, 0.0, 0.0),
    (11, 13, 0.02225, 0.0731, 0.01876, 0.0, 0.0),
    (12, 14, 0.0215, 0.0707, 0.01816, 0.0, 0.0),
    (13, 15, 0.0744, 0.2444, 0.06268, 0.0, 0.0),
    (14, 15, 0.0595, 0.195, 0.0502, 0.0, 0.0),
    (12, 16, 0.0212, 0.0834, 0.0214, 0.0, 0.0),
    (15, 17, 0.0132, 0.0437, 0.0444, 0.0, 0.0),
    (16, 17, 0.0454, 0.1801, 0.0466, 0.0, 0.0),
    (17, 18, 0.0123, 0.0505, 0.01298, 0.0, 0.0),
    (18, 19, 0.01119, 0.0493, 0.01142, 0.0, 0.0),
    (19, 20, 0.0252, 0.117, 0.0298, 0.0, 0.0),
    (15, 19, 0.012, 0.0394, 0.0101, 0.0, 0.0),
    (20, 21, 0.0183, 0.0849, 0.0216, 0.0, 0.0),
    (21, 22, 0.0209, 0.097, 0.0246, 0.0, 0.0),
    (22, 23, 0.0342, 0.159, 0.0404, 0.0, 0.0),
    (23, 24, 0.0135, 0.0492, 0.0498, 0.0, 0.0),
    (23, 25, 0.0156, 0.08, 0.0864, 0.0, 0.0),
    (26, 25, 0.0, 0.0382, 0.0, 0.960, 0.0),
    (25, 27, 0.0318, 0.163, 0.1764, 0.0, 0.0),
    (27, 28, 0.01913, 0.0855, 0.0216, 0.0, 0.0),
    (28, 29, 0.0237, 0.0943, 0.0238, 0.0, 0.0),
    (30, 17, 0.0, 0.0388, 0.0, 0.960, 0.0),
    (8, 30, 0.00431, 0.0504, 0.514, 0.0, 0.0),
    (26, 30, 0.00799, 0.086, 0.908, 0.0, 0.0),
    (17, 31, 0.0474, 0.1563, 0.0399, 0.0, 0.0),
    (29, 31, 0.0108, 0.0331, 0.0083, 0.0, 0.0),
    (23, 32, 0.0317, 0.1153, 0.1173, 0.0, 0.0),
    (31, 32, 0.0298, 0.0985, 0.0251, 0.0, 0.0),
    (27, 32, 0.0229, 0.0755, 0.01926, 0.0, 0.0),
    (15, 33, 0.038, 0.1244, 0.03194, 0.0, 0.0),
    (19, 34, 0.0752, 0.247, 0.0632, 0.0, 0.0),
    (35, 36, 0.00224, 0.0102, 0.00268, 0.0, 0.0),
    (35, 37, 0.011, 0.0497, 0.01318, 0.0, 0.0),
    (33, 37, 0.0415, 0.142, 0.0366, 0.0, 0.0),
    (34, 36, 0.00871, 0.0268, 0.00568, 0.0, 0.0),
    (34, 37, 0.00256, 0.0094, 0.00984, 0.0, 0.0),
    (38, 37, 0.0, 0.0375, 0.0, 0.935, 0.0),
    (37, 39, 0.0321, 0.106, 0.027, 0.0, 0.0),
    (37, 40, 0.0593, 0.168, 0.042, 0.0, 0.0),
    (30, 38, 0.00464, 0.054, 0.422, 0.0, 0.0),
    (39, 40, 0.0184, 0.0605, 0.01552, 0.0, 0.0),
    (40, 41, 0.0145, 0.0487, 0.01222, 0.0, 0.0),
    (40, 42, 0.0555, 0.183, 0.0466, 0.0, 0.0),
    (41, 42, 0.041, 0.135, 0.0344, 0.0, 0.0),
    (43, 44, 0.0608, 0.2454, 0.06068, 0.0, 0.0),
    (34, 43, 0.0413, 0.1681, 0.04226, 0.0, 0.0),
    (44, 45, 0.0224, 0.0901, 0.0224, 0.0, 0.0),
    (45, 46, 0.04, 0.1356, 0.0332, 0.0, 0.0),
    (46, 47, 0.038, 0.127, 0.0316, 0.0, 0.0),
    (46, 48, 0.0601, 0.189, 0.0472, 0.0, 0.0),
    (47, 49, 0.0191, 0.0625, 0.01604, 0.0, 0.0),
    (42, 49, 0.0715, 0.323, 0.086, 0.0, 0.0),
    (42, 49, 0.0715, 0.323, 0.086, 0.0, 0.0),
    (45, 49, 0.0684, 0.186, 0.0444, 0.0, 0.0),
    (48, 49, 0.0179, 0.0505, 0.01258, 0.0, 0.0),
    (49, 50, 0.0267, 0.0752, 0.01874, 0.0, 0.0),
    (49, 51, 0.0486, 0.137, 0.0342, 0.0, 0.0),
    (51, 52, 0.0203, 0.0588, 0.01396, 0.0, 0.0),
    (52, 53, 0.0405, 0.1635, 0.04058, 0.0, 0.0),
    (53, 54, 0.0263, 0.122, 0.031, 0.0, 0.0),
    (49, 54, 0.073, 0.289, 0.0738, 0.0, 0.0),
    (49, 54, 0.0869, 0.291, 0.073, 0.0, 0.0),
    (54, 55, 0.0169, 0.0707, 0.0202, 0.0, 0.0),
    (54, 56, 0.00275, 0.00955, 0.00732, 0.0, 0.0),
    (55, 56, 0.00488, 0.0151, 0.00374, 0.0, 0.0),
    (56, 57, 0.0343, 0.0966, 0.0242, 0.0, 0.0),
    (50, 57, 0.0474, 0.134, 0.0332, 0.0, 0.0),
    (56, 58, 0.0343, 0.0966, 0.0242, 0.0, 0.0),
    (51, 58, 0.0255, 0.0719, 0.01788, 0.0, 0.0),
    (54, 59, 0.0503, 0.2293, 0.0598, 0.0, 0.0),
    (56, 59, 0.0825, 0.251, 0.0569, 0.0, 0.0),
    (56, 59, 0.0803, 0.239, 0.0536, 0.0, 0.0),
    (55, 59, 0.04739, 0.2158, 0.05646, 0.0, 0.0),
    (59, 60, 0.0317, 0.145, 0.0376, 0.0, 0.0),
    (59, 61, 0.0328, 0.15, 0.0388, 0.0, 0.0),
    (60, 61, 0.00264, 0.0135, 0.01456, 0.0, 0.0),
    (60, 62, 0.0123, 0.0561, 0.01468, 0.0, 0.0),
    (61, 62, 0.00824, 0.0376, 0.0098, 0.0, 0.0),
    (63, 59, 0.0, 0.0386, 0.0, 0.960, 0.0),
    (63, 64, 0.00172, 0.02, 0.216, 0.0, 0.0),
    (64, 61, 0.0, 0.0268, 0.0, 0.985, 0.0),
    (38, 65, 0.00901, 0.0986, 1.046, 0.0, 0.0),
    (64, 65, 0.00269, 0.0302, 0.38, 0.0, 0.0),
    (49, 66, 0.018, 0.0919, 0.0248, 0.0, 0.0),
    (49, 66, 0.018, 0.0919, 0.0248, 0.0, 0.0),
    (62, 66, 0.0482, 0.218, 0.0578, 0.0, 0.0),
    (62, 67, 0.0258, 0.117, 0.031, 0.0, 0.0),
    (65, 66, 0.0, 0.037, 0.0, 0.935, 0.0),
    (66, 67, 0.0224, 0.1015, 0.02682, 0.0, 0.0),
    (65, 68, 0.00138, 0.016, 0.638, 0.0, 0.0),
    (47, 69, 0.0844, 0.2778, 0.07092, 0.0, 0.0),
    (49, 69, 0.0985, 0.324, 0.0828, 0.0, 0.0),
    (68, 69, 0.0, 0.037, 0.0, 0.935, 0.0),
    (69, 70, 0.03, 0.127, 0.122, 0.0, 0.0),
    (24, 70, 0.00221, 0.4115, 0.10198, 0.0, 0.0),
    (70, 71, 0.00882, 0.0355, 0.00878, 0.0, 0.0),
    (24, 72, 0.0488, 0.196, 0.0488, 0.0, 0.0),
    (71, 72, 0.0446, 0.18, 0.04444, 0.0, 0.0),
    (71, 73, 0.00866, 0.0454, 0.01178, 0.0, 0.0),
    (70, 74, 0.0401, 0.1323, 0.03368, 0.0, 0.0),
    (70, 75, 0.0428, 0.141, 0.036, 0.0, 0.0),
    (69, 75, 0.0405, 0.122, 0.124, 0.0, 0.0),
    (74, 75, 0.0123, 0.0406, 0.01034, 0.0, 0.0),
    (76, 77, 0.0444, 0.148, 0.0368, 0.0, 0.0),
    (69, 77, 0.0309, 0.101, 0.1038, 0.0, 0.0),
    (75, 77, 0.0601, 0.1999, 0.04978, 0.0, 0.0),
    (77, 78, 0.00376, 0.0124, 0.01264, 0.0, 0.0),
    (78, 79, 0.00546, 0.0244, 0.00648, 0.0, 0.0),
    (77, 80, 0.017, 0.0485, 0.0472, 0.0, 0.0),
    (77, 80, 0.0294, 0.105, 0.0228, 0.0, 0.0),
    (79, 80, 0.0156, 0.0704, 0.0187, 0.0, 0.0),
    (68, 81, 0.00175, 0.0202, 0.808, 0.0, 0.0),
    (81, 80, 0.0, 0.037, 0.0, 0.935, 0.0),
    (77, 82, 0.0298, 0.0853, 0.08174, 0.0, 0.0),
    (82, 83, 0.0112, 0.03665, 0.03796, 0.0, 0.0),
    (83, 84, 0.0625, 0.132, 0.0258, 0.0, 0.0),
    (83, 85, 0.043, 0.148, 0.0348, 0.0, 0.0),
    (84, 85, 0.0302, 0.0641, 0.01234, 0.0, 0.0),
    (85, 86, 0.035, 0.123, 0.0276, 0.0, 0.0),
    (86, 87, 0.02828, 0.2074, 0.0445, 0.0, 0.0),
    (85, 88, 0.02, 0.102, 0.0276, 0.0, 0.0),
    (85, 89, 0.0239, 0.173, 0.047, 0.0, 0.0),
    (88, 89, 0.0139, 0.0712, 0.01934, 0.0, 0.0),
    (89, 90, 0.0518, 0.188, 0.0528, 0.0, 0.0),
    (89, 90, 0.0238, 0.0997, 0.106, 0.0, 0.0),
    (90, 91, 0.0254, 0.0836, 0.0214, 0.0, 0.0),
    (89, 92, 0.0099, 0.0505, 0.0548, 0.0, 0.0),
    (89, 92, 0.0393, 0.1581, 0.0414, 0.0, 0.0),
    (91, 92, 0.0387, 0.1272, 0.03268, 0.0, 0.0),
    (92, 93, 0.0258, 0.0848, 0.0218, 0.0, 0.0),
    (92, 94, 0.0481, 0.158, 0.0406, 0.0, 0.0),
    (93, 94, 0.0223, 0.0732, 0.01876, 0.0, 0.0),
    (94, 95, 0.0132, 0.0434, 0.0111, 0.0, 0.0),
    (80, 96, 0.0356, 0.182, 0.0494, 0.0, 0.0),
    (82, 96, 0.0162, 0.053, 0.0544, 0.0, 0.0),
    (94, 96, 0.0269, 0.0869, 0.023, 0.0, 0.0),
    (80, 97, 0.0183, 0.0934, 0.0254, 0.0, 0.0),
    (80, 98, 0.0238, 0.108, 0.0286, 0.0, 0.0),
    (80, 99, 0.0454, 0.206, 0.0546, 0.0, 0.0),
    (92, 100, 0.0648, 0.295, 0.0472, 0.0, 0.0),
    (94, 100, 0.0178, 0.058, 0.0604, 0.0, 0.0),
    (95, 96, 0.0171, 0.0547, 0.01474, 0.0, 0.0),
    (96, 97, 0.0173, 0.0885, 0.024, 0.0, 0.0),
    (98, 100, 0.0397, 0.179, 0.0476, 0.0, 0.0),
    (99, 100, 0.018, 0.0813, 0.0216, 0.0, 0.0),
    (100, 101, 0.0277, 0.1262, 0.0328, 0.0, 0.0),
    (92, 102, 0.0123, 0.0559, 0.01464, 0.0, 0.0),
    (101, 102, 0.0246, 0.112, 0.0294, 0.0, 0.0),
    (100, 103, 0.016, 0.0525, 0.0536, 0.0, 0.0),
    (100, 104, 0.0451, 0.204, 0.0541, 0.0, 0.0),
    (103, 104, 0.0466, 0.1584, 0.0407, 0.0, 0.0),
    (103, 105, 0.0535, 0.1625, 0.0408, 0.0, 0.0),
    (100, 106, 0.0605, 0.229, 0.062, 0.0, 0.0),
    (104, 105, 0.00994, 0.0378, 0.00986, 0.0, 0.0),
    (105, 106, 0.014, 0.0547, 0.01434, 0.0, 0.0),
    (105, 107, 0.053, 0.183, 0.0472, 0.0, 0.0),
    (105, 108, 0.0261, 0.0703, 0.01844, 0.0, 0.0),
    (106, 107, 0.053, 0.183, 0.0472, 0.0, 0.0),
    (108, 109, 0.0105, 0.0288, 0.0076, 0.0, 0.0),
    (103, 110, 0.03906, 0.1813, 0.0461, 0.0, 0.0),
    (109, 110, 0.0278, 0.0762, 0.0202, 0.0, 0.0),
    (110, 111, 0.022, 0.0755, 0.02, 0.0, 0.0),
    (110, 112, 0.0247, 0.064, 0.062, 0.0, 0.0),
    (17, 113, 0.00913, 0.0301, 0.00768, 0.0, 0.0),
    (32, 113, 0.0615, 0.203, 0.0518, 0.0, 0.0),
    (32, 114, 0.0135, 0.0612, 0.01628, 0.0, 0.0),
    (27, 115, 0.0164, 0.0741, 0.01972, 0.0, 0.0),
    (114, 115, 0.0023, 0.0104, 0.00276, 0.0, 0.0),
    (68, 116, 0.00034, 0.00405, 0.164, 0.0, 0.0),
    (12, 117, 0.0329, 0.14, 0.0358, 0.0, 0.0),
    (75, 118, 0.0145, 0.0481, 0.01198, 0.0, 0.0),
    (76, 118, 0.0164, 0.0544, 0.01356, 0.0, 0.0),
]
