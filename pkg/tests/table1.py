"""Reference LPIPS values (x10 as printed) per method and dataset H1..H4."""

LPIPS_X10 = {
    "im_tex": {"H1": 1.623, "H2": 1.617, "H3": 1.569, "H4": 1.571},
    "pix2pixhd": {"H1": 1.713, "H2": 1.713, "H3": 1.640, "H4": 1.615},
    "ex_tex": {"H1": 1.691, "H2": 1.683, "H3": 1.676, "H4": 1.629},
    "only_ego": {"H1": 1.769, "H2": 1.704, "H3": 1.660, "H4": 1.578},
    "only_mv": {"H1": 1.738, "H2": 1.626, "H3": 1.585, "H4": 1.587},
    "fea_net": {"H1": 1.695, "H2": 1.687, "H3": 1.630, "H4": 1.616},
}
PUBLISHED_IM_TEX_LPIPS_RI = 7.562
