"""Closed-form parameter count of a network configuration.

Written from the layer shapes alone, without reading the C++ sources; the
totals it prints are pinned in test_network.cpp.
"""


def layer_norm(c):
    return 2 * c


def tsa(c, heads):
    qkv = c * 3 * c + 3 * c
    dw = 9 * 3 * c + 3 * c
    proj = c * c + c
    return qkv + dw + heads + proj


def gfn(c, ratio=2.66):
    h = int(c * ratio)
    return c * 2 * h + 2 * h + 9 * 2 * h + 2 * h + h * c + c


def plain(c, heads):
    return 2 * layer_norm(c) + tsa(c, heads) + gfn(c)


def dat(c, heads, cp):
    return plain(c, heads) + cp * c + c + c * 6 * c + 6 * c


def cat(c, heads, ct):
    text_mlp = ct * c + c + c * c + c
    ra = 3 * (c * c + c)
    return plain(c, heads) + text_mlp + ra


def rbt(c, heads):
    half = c // 2
    lra = 3 * (9 * half * half + half)
    return plain(c, heads) + lra + tsa(half, heads) + c * c + c


def conv(k, cin, cout):
    return k * k * cin * cout + cout


def image_encoder(ch, cp):
    n = conv(3, 3, ch[0])
    for i in range(4):
        n += 2 * conv(3, ch[i], ch[i])
        if i < 3:
            n += conv(3, ch[i], ch[i + 1])
    return n + ch[3] * cp + cp


def refiner(ct, cp, queries):
    dense = cp * cp + cp
    return queries * cp + ct * cp + cp + 9 * dense + 2 * cp + cp * 4 * cp + 4 * cp + 4 * cp * cp + cp


def total(ch, heads, enc, mid, dec, cp, queries, ct, image_ch):
    levels = len(ch)
    n = image_encoder(image_ch, cp) + refiner(ct, cp, queries) + conv(3, 3, ch[0])
    for l in range(levels - 1):
        n += enc[l] * dat(ch[l], heads[l], cp) + conv(3, ch[l], ch[l + 1])
    n += mid * cat(ch[-1], heads[-1], ct)
    for j, l in enumerate(range(levels - 2, -1, -1)):
        up = conv(3, ch[l + 1], 4 * ch[l])
        fuse = 2 * ch[l] * ch[l] + ch[l]
        phi = conv(3, 3, ch[l])
        n += up + fuse + phi + dec[j] * rbt(ch[l], heads[l])
    return n + conv(3, ch[0], 3)


if __name__ == "__main__":
    print("tiny", total([16, 32, 64, 128], [1, 2, 4, 8], [1, 1, 1], 2, [1, 1, 1], 64, 4, 768, [8, 16, 32, 64]))
    print("full", total([48, 96, 192, 384], [1, 2, 4, 8], [4, 6, 6], 8, [6, 6, 4], 256, 8, 768, [32, 64, 128, 256]))
