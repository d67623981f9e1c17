#pragma once

// Operation-preserving cipher layer for cross-client feature combination.
// Two interchangeable backends sit behind one EncryptedVector type:
//
//  - transparent: fixed-point integers in the clear, exact arithmetic, for
//    testing protocol logic without crypto numerics;
//  - bfv: a depth-1 textbook BFV implementation (RLWE, power-of-two
//    negacyclic ring, slot batching, relinearization). Desk-scale parameters,
//    deliberately NOT production-secure; it exists so the encrypted protocol
//    path is real, not mocked.
//
// Plaintext values are fixed-point encoded at scale D (delta); multiplying
// two ciphertexts yields scale D^2 and spends the single depth unit. The
// ciphertext modulus is a pair of word-sized primes handled in RNS form; the
// exact tensor/rescale step in multiplication runs over five auxiliary NTT
// primes with a GMP-assisted exact rounding.

#include <gmpxx.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "common.hpp"

namespace flafe {

enum class HEBackend { Transparent, Bfv };

struct HEParams {
    HEBackend backend = HEBackend::Transparent;
    std::size_t ring_dim = 2048;  // n, power of two
    int limb_bits = 60;           // bit size of each ciphertext-modulus prime
    int plain_bits = 40;          // bit size of the plaintext modulus prime
    std::uint64_t delta = 4096;   // fixed-point scale D
};

namespace hedetail {

using u64 = std::uint64_t;
using u128 = __uint128_t;

inline u64 addmod(u64 a, u64 b, u64 p) {
    u64 s = a + b;  // a,b < p < 2^63 so no overflow
    return s >= p ? s - p : s;
}
inline u64 submod(u64 a, u64 b, u64 p) { return a >= b ? a - b : a + p - b; }
inline u64 mulmod(u64 a, u64 b, u64 p) { return u64((u128(a) * b) % p); }
inline u64 powmod(u64 base, u64 exp, u64 p) {
    u64 r = 1;
    base %= p;
    while (exp) {
        if (exp & 1) r = mulmod(r, base, p);
        base = mulmod(base, base, p);
        exp >>= 1;
    }
    return r;
}
inline u64 invmod(u64 a, u64 p) { return powmod(a, p - 2, p); }  // p prime

// deterministic Miller-Rabin, valid for all 64-bit inputs
inline bool is_prime(u64 n) {
    if (n < 2) return false;
    for (u64 sp : {2ull, 3ull, 5ull, 7ull, 11ull, 13ull, 17ull, 19ull, 23ull, 29ull, 31ull, 37ull}) {
        if (n % sp == 0) return n == sp;
    }
    u64 d = n - 1;
    int r = 0;
    while ((d & 1) == 0) {
        d >>= 1;
        ++r;
    }
    for (u64 a : {2ull, 3ull, 5ull, 7ull, 11ull, 13ull, 17ull, 19ull, 23ull, 29ull, 31ull, 37ull}) {
        u64 x = powmod(a, d, n);
        if (x == 1 || x == n - 1) continue;
        bool witness = true;
        for (int i = 1; i < r; ++i) {
            x = mulmod(x, x, n);
            if (x == n - 1) {
                witness = false;
                break;
            }
        }
        if (witness) return false;
    }
    return true;
}

// smallest prime >= start with p = 1 (mod modulus), skipping `taken`
inline u64 find_ntt_prime(u64 start, u64 modulus, const std::vector<u64>& taken) {
    u64 p = start - ((start - 1) % modulus);  // largest p <= start with p = 1 mod m
    if (p < start) p += modulus;
    for (;; p += modulus) {
        if (!is_prime(p)) continue;
        bool clash = false;
        for (u64 t : taken) clash = clash || (t == p);
        if (!clash) return p;
    }
}

// smallest prime >= start with p = 1 (mod two_n) and partner*p = 1 (mod t),
// so the full ciphertext modulus is 1 mod t. Rescaling a product then keeps
// every noise term far below the decryption bound; with q mod t left
// arbitrary the term (q mod t)/t * m_a*m_b alone can exceed it, and slot
// decoding turns even a one-unit coefficient error into full-range garbage.
inline u64 find_paired_prime(u64 start, u64 two_n, u64 t, u64 partner,
                             const std::vector<u64>& taken) {
    u64 want = invmod(partner % t, t);  // residue mod t
    // CRT: c = 1 (mod two_n), c = want (mod t); modulus M = t * two_n
    u64 k = mulmod(submod(want % t, 1 % t, t), invmod(two_n % t, t), t);
    u128 c = u128(1) + u128(two_n) * k;
    u128 M = u128(t) * two_n;
    u128 p = c;
    if (p < start) p += ((u128(start) - p + M - 1) / M) * M;
    for (;; p += M) {
        if (p >= (u128(1) << 63)) throw ParamError("no pairable ciphertext prime in range");
        u64 cand = u64(p);
        if (!is_prime(cand)) continue;
        bool clash = false;
        for (u64 v : taken) clash = clash || (v == cand);
        if (!clash) return cand;
    }
}

// primitive 2n-th root of unity mod p (requires 2n | p-1)
inline u64 find_psi(u64 p, u64 two_n) {
    for (u64 x = 2;; ++x) {
        u64 psi = powmod(x, (p - 1) / two_n, p);
        if (psi != 1 && powmod(psi, two_n / 2, p) == p - 1) return psi;
    }
}

struct NttTables {
    u64 p = 0;
    std::size_t n = 0;
    std::vector<u64> psi_rev;      // psi^bitrev(i)
    std::vector<u64> psi_inv_rev;  // psi^-bitrev(i)
    u64 n_inv = 0;

    void build(u64 prime, std::size_t dim) {
        p = prime;
        n = dim;
        int logn = 0;
        while ((std::size_t(1) << logn) < n) ++logn;
        u64 psi = find_psi(p, 2 * u64(n));
        u64 psi_inv = invmod(psi, p);
        psi_rev.resize(n);
        psi_inv_rev.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t rev = 0;
            for (int b = 0; b < logn; ++b)
                if (i & (std::size_t(1) << b)) rev |= std::size_t(1) << (logn - 1 - b);
            psi_rev[rev] = powmod(psi, i, p);
            psi_inv_rev[rev] = powmod(psi_inv, i, p);
        }
        n_inv = invmod(u64(n), p);
    }
};

// in-place negacyclic NTT (Cooley-Tukey, psi powers merged)
inline void ntt_forward(std::vector<u64>& a, const NttTables& T) {
    std::size_t n = T.n, t = n;
    for (std::size_t m = 1; m < n; m <<= 1) {
        t >>= 1;
        for (std::size_t i = 0; i < m; ++i) {
            u64 S = T.psi_rev[m + i];
            std::size_t j1 = 2 * i * t;
            for (std::size_t j = j1; j < j1 + t; ++j) {
                u64 U = a[j];
                u64 V = mulmod(a[j + t], S, T.p);
                a[j] = addmod(U, V, T.p);
                a[j + t] = submod(U, V, T.p);
            }
        }
    }
}

// in-place inverse (Gentleman-Sande), scaling by n^-1 at the end
inline void ntt_inverse(std::vector<u64>& a, const NttTables& T) {
    std::size_t n = T.n, t = 1;
    for (std::size_t m = n; m > 1; m >>= 1) {
        std::size_t j1 = 0, h = m >> 1;
        for (std::size_t i = 0; i < h; ++i) {
            u64 S = T.psi_inv_rev[h + i];
            for (std::size_t j = j1; j < j1 + t; ++j) {
                u64 U = a[j];
                u64 V = a[j + t];
                a[j] = addmod(U, V, T.p);
                a[j + t] = mulmod(submod(U, V, T.p), S, T.p);
            }
            j1 += 2 * t;
        }
        t <<= 1;
    }
    for (auto& v : a) v = mulmod(v, T.n_inv, T.p);
}

// reference negacyclic product, O(n^2); the oracle the NTT is tested against
inline std::vector<u64> negacyclic_mul_naive(const std::vector<u64>& a, const std::vector<u64>& b,
                                             u64 p) {
    std::size_t n = a.size();
    std::vector<u64> out(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        if (a[i] == 0) continue;
        for (std::size_t j = 0; j < n; ++j) {
            u64 prod = mulmod(a[i], b[j], p);
            std::size_t k = i + j;
            if (k < n)
                out[k] = addmod(out[k], prod, p);
            else
                out[k - n] = submod(out[k - n], prod, p);
        }
    }
    return out;
}

}  // namespace hedetail

// ---- key material ----

// each polynomial is stored per RNS limb: index 0 mod q1, index 1 mod q2
using LimbPoly = std::array<std::vector<std::uint64_t>, 2>;

struct PublicKey {
    std::uint64_t key_id = 0;
    LimbPoly p0_ntt, p1_ntt;  // NTT domain
};
struct SecretKey {
    std::uint64_t key_id = 0;
    LimbPoly s_ntt;  // never serialized into results
};
struct RelinKey {
    std::uint64_t key_id = 0;
    std::vector<LimbPoly> rk0_ntt, rk1_ntt;  // one entry per base-2^30 digit
};
struct KeyPair {
    PublicKey pk;
    SecretKey sk;
    RelinKey rlk;
};

struct BfvCipher {
    LimbPoly c0, c1;  // coefficient domain
};

struct EncryptedVector {
    HEBackend backend = HEBackend::Transparent;
    std::size_t length = 0;
    std::uint64_t scale = 0;  // D after encryption, D^2 after a multiplication
    int depth = 0;            // ciphertext-by-ciphertext multiplications spent
    std::uint64_t key_id = 0;
    double meta_std = 0.0;  // pooled operand spread, carried for noise sizing
    std::vector<BfvCipher> chunks;
    std::vector<std::int64_t> plain;

    // payload size in 64-bit words, the unit the communication ledger counts
    std::size_t scalar_count() const {
        if (backend == HEBackend::Bfv) {
            std::size_t per = chunks.empty() ? 0 : 4 * chunks.front().c0[0].size();
            return chunks.size() * per;
        }
        return plain.size();
    }
};

// ---- context ----

class HEContext {
  public:
    explicit HEContext(const HEParams& params) : params_(params) {
        using namespace hedetail;
        if (params_.ring_dim < 16 || (params_.ring_dim & (params_.ring_dim - 1)) != 0)
            throw ParamError("ring dimension must be a power of two >= 16");
        if (params_.limb_bits < 50 || params_.limb_bits > 62)
            throw ParamError("ciphertext modulus prime size must lie in [50, 62] bits");
        if (params_.plain_bits < 20 || params_.plain_bits > 50)
            throw ParamError("plaintext modulus size must lie in [20, 50] bits");
        if (params_.delta < 2) throw ParamError("fixed-point scale must be >= 2");

        u64 two_n = 2 * u64(params_.ring_dim);
        std::vector<u64> taken;
        t_ = find_ntt_prime(u64(1) << params_.plain_bits, two_n, taken);
        taken.push_back(t_);
        // no plaintext wraparound through one multiplication: D^2 * |v| < t/2
        // must admit at least |v| = 1
        if (u128(params_.delta) * params_.delta >= u128(t_ / 2))
            throw ParamError("fixed-point scale too large for the plaintext modulus");

        q_[0] = find_ntt_prime(u64(1) << params_.limb_bits, two_n, taken);
        taken.push_back(q_[0]);
        q_[1] = find_paired_prime(u64(1) << params_.limb_bits, two_n, t_, q_[0], taken);
        taken.push_back(q_[1]);
        for (std::size_t i = 0; i < kAuxPrimes; ++i) {
            aux_[i] = find_ntt_prime((u64(1) << 62) + (i == 0 ? 0 : aux_[i - 1] - (u64(1) << 62) + 1),
                                     two_n, taken);
            taken.push_back(aux_[i]);
        }

        // the aux CRT basis must cover the centered tensor coefficients:
        // |d| <= 2 * n * (q/2)^2, so prod(aux) must exceed twice that
        double need_bits = 2.0 + std::log2(double(params_.ring_dim)) +
                           2.0 * (std::log2(double(q_[0])) + std::log2(double(q_[1])) - 1.0);
        double have_bits = 0;
        for (u64 p : aux_) have_bits += std::log2(double(p));
        if (have_bits < need_bits + 2)
            throw ParamError("auxiliary CRT basis too small for exact multiplication");

        tab_t_.build(t_, params_.ring_dim);
        for (int i = 0; i < 2; ++i) tab_q_[i].build(q_[i], params_.ring_dim);
        for (std::size_t i = 0; i < kAuxPrimes; ++i) tab_aux_[i].build(aux_[i], params_.ring_dim);

        q_big_ = mpz_class(hi_str(q_[0])) * mpz_class(hi_str(q_[1]));
        q_half_ = q_big_ >> 1;
        t_big_ = mpz_class(hi_str(t_));
        mpz_class delta_bfv = q_big_ / t_big_;
        for (int i = 0; i < 2; ++i)
            delta_bfv_[i] = mpz_fdiv_ui(delta_bfv.get_mpz_t(), q_[i]);

        inv_q0_mod_q1_ = invmod(q_[0] % q_[1], q_[1]);
        q_u128_ = u128(q_[0]) * q_[1];
        for (std::size_t j = 0; j < kAuxPrimes; ++j) q_mod_aux_[j] = u64(q_u128_ % aux_[j]);

        // Garner constants for the aux basis: inv(prod_{i<j} p_i) mod p_j and
        // the prefix products mod p_j
        for (std::size_t j = 0; j < kAuxPrimes; ++j) {
            u64 prod = 1;
            for (std::size_t i = 0; i < j; ++i) prod = mulmod(prod, aux_[i] % aux_[j], aux_[j]);
            aux_prefix_inv_[j] = invmod(prod, aux_[j]);
            for (std::size_t i = 0; i < kAuxPrimes; ++i)
                aux_prefix_mod_[j][i] = (i < j) ? u64(1) : 0;
            u64 acc = 1;
            for (std::size_t i = 0; i < j; ++i) {
                aux_prefix_mod_[j][i] = acc;  // prod_{k<i} p_k mod p_j
                acc = mulmod(acc, aux_[i] % aux_[j], aux_[j]);
            }
            aux_prefix_full_[j] = acc;  // unused beyond symmetry; kept for clarity
        }
        aux_big_ = 1;
        for (u64 p : aux_) aux_big_ *= mpz_class(hi_str(p));
        aux_half_ = aux_big_ >> 1;

        relin_digits_ = 0;
        {
            mpz_class tmp = q_big_;
            while (tmp > 0) {
                tmp >>= kRelinLogBase;
                ++relin_digits_;
            }
        }
    }

    const HEParams& params() const { return params_; }
    std::uint64_t plain_modulus() const { return t_; }
    std::uint64_t limb_modulus(int i) const { return q_[std::size_t(i)]; }
    std::uint64_t scale_base() const { return params_.delta; }
    std::uint64_t scale_squared() const { return params_.delta * params_.delta; }

    // ---- fixed-point codec ----

    // at the base scale a value must survive one multiplication; at the
    // squared scale (noise added post-product) only plain representability
    std::int64_t encode_limit(std::uint64_t scale) const {
        if (scale == scale_base()) return std::int64_t(t_ / (2 * params_.delta));
        if (scale == scale_squared()) return std::int64_t((t_ - 1) / 2);
        throw ParamError("unsupported fixed-point scale");
    }

    std::vector<std::int64_t> encode_fixed(const std::vector<double>& values,
                                           std::uint64_t scale) const {
        std::int64_t limit = encode_limit(scale);
        std::vector<std::int64_t> out(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) {
            double scaled = values[i] * double(scale);
            if (!std::isfinite(scaled) || std::fabs(scaled) > double(limit))
                throw RangeError("value out of fixed-point range at this scale");
            out[i] = std::int64_t(std::llround(scaled));
        }
        return out;
    }

    std::vector<double> decode_fixed(const std::vector<std::int64_t>& ints,
                                     std::uint64_t scale) const {
        std::vector<double> out(ints.size());
        for (std::size_t i = 0; i < ints.size(); ++i) out[i] = double(ints[i]) / double(scale);
        return out;
    }

    // ---- key generation ----

    KeyPair keygen(RngStream& rng) const {
        using namespace hedetail;
        KeyPair kp;
        std::uint64_t key_id = rng.next_u64();
        kp.pk.key_id = kp.sk.key_id = kp.rlk.key_id = key_id;
        if (params_.backend == HEBackend::Transparent) return kp;

        std::size_t n = params_.ring_dim;
        std::vector<std::int64_t> s = ternary(n, rng);
        std::vector<std::int64_t> e = cbd(n, rng);
        LimbPoly a = uniform_poly(rng);

        kp.sk.s_ntt = to_ntt(signed_poly(s));
        // p0 = -(a s + e), p1 = a
        LimbPoly as = mul_ntt_plain(a, kp.sk.s_ntt);
        LimbPoly p0;
        for (int i = 0; i < 2; ++i) {
            p0[i].resize(n);
            for (std::size_t j = 0; j < n; ++j) {
                u64 v = addmod(as[i][j], to_mod(e[j], q_[i]), q_[i]);
                p0[i][j] = v == 0 ? 0 : q_[i] - v;
            }
        }
        kp.pk.p0_ntt = to_ntt(p0);
        kp.pk.p1_ntt = to_ntt(a);

        // relinearization keys over base 2^30 digits:
        //   rk0[d] = -(a_d s + e_d) + 2^(30 d) s^2,  rk1[d] = a_d
        LimbPoly s2;
        for (int i = 0; i < 2; ++i) {
            s2[i] = kp.sk.s_ntt[i];
            for (std::size_t j = 0; j < n; ++j) s2[i][j] = mulmod(s2[i][j], kp.sk.s_ntt[i][j], q_[i]);
            ntt_inverse(s2[i], tab_q_[i]);
        }
        kp.rlk.rk0_ntt.resize(relin_digits_);
        kp.rlk.rk1_ntt.resize(relin_digits_);
        mpz_class power = 1;
        for (int d = 0; d < relin_digits_; ++d) {
            LimbPoly a_d = uniform_poly(rng);
            std::vector<std::int64_t> e_d = cbd(n, rng);
            LimbPoly a_d_ntt = to_ntt(a_d);
            LimbPoly as_d = mul_ntt_plain(a_d, kp.sk.s_ntt);
            LimbPoly rk0;
            for (int i = 0; i < 2; ++i) {
                u64 pw = mpz_fdiv_ui(power.get_mpz_t(), q_[i]);
                rk0[i].resize(n);
                for (std::size_t j = 0; j < n; ++j) {
                    u64 neg = addmod(as_d[i][j], to_mod(e_d[j], q_[i]), q_[i]);
                    neg = neg == 0 ? 0 : q_[i] - neg;
                    rk0[i][j] = addmod(neg, mulmod(pw, s2[i][j], q_[i]), q_[i]);
                }
            }
            kp.rlk.rk0_ntt[std::size_t(d)] = to_ntt(rk0);
            kp.rlk.rk1_ntt[std::size_t(d)] = a_d_ntt;
            power <<= kRelinLogBase;
        }
        return kp;
    }

    // ---- encrypt / decrypt ----

    EncryptedVector encrypt(const PublicKey& pk, const std::vector<double>& values,
                            std::uint64_t scale, RngStream& rng) const {
        using namespace hedetail;
        EncryptedVector ct;
        ct.backend = params_.backend;
        ct.length = values.size();
        ct.scale = scale;
        ct.depth = (scale == scale_squared()) ? 1 : 0;
        ct.key_id = pk.key_id;
        ct.meta_std = sample_std(values);

        std::vector<std::int64_t> encoded = encode_fixed(values, scale);
        if (params_.backend == HEBackend::Transparent) {
            ct.plain = std::move(encoded);
            return ct;
        }

        std::size_t n = params_.ring_dim;
        std::size_t chunks = (values.size() + n - 1) / n;
        if (chunks == 0) chunks = 1;
        for (std::size_t c = 0; c < chunks; ++c) {
            // slot layout -> plaintext polynomial (inverse NTT mod t)
            std::vector<u64> m(n, 0);
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t idx = c * n + i;
                if (idx >= encoded.size()) break;
                std::int64_t v = encoded[idx];
                m[i] = v >= 0 ? u64(v) : t_ - u64(-v);
            }
            ntt_inverse(m, tab_t_);

            std::vector<std::int64_t> u = ternary(n, rng);
            std::vector<std::int64_t> e1 = cbd(n, rng);
            std::vector<std::int64_t> e2 = cbd(n, rng);
            LimbPoly u_ntt = to_ntt(signed_poly(u));

            BfvCipher cipher;
            for (int i = 0; i < 2; ++i) {
                std::vector<u64> c0(n), c1(n);
                for (std::size_t j = 0; j < n; ++j) {
                    c0[j] = mulmod(pk.p0_ntt[i][j], u_ntt[i][j], q_[i]);
                    c1[j] = mulmod(pk.p1_ntt[i][j], u_ntt[i][j], q_[i]);
                }
                ntt_inverse(c0, tab_q_[i]);
                ntt_inverse(c1, tab_q_[i]);
                for (std::size_t j = 0; j < n; ++j) {
                    // center the plaintext coefficient before scaling so the
                    // phase never wraps mod q; wrapped phases decrypt fine at
                    // depth 0 but poison the rescaling step of a product
                    u64 dm;
                    if (m[j] > t_ / 2) {
                        dm = mulmod(delta_bfv_[i], t_ - m[j], q_[i]);
                        dm = dm == 0 ? 0 : q_[i] - dm;
                    } else {
                        dm = mulmod(delta_bfv_[i], m[j], q_[i]);
                    }
                    c0[j] = addmod(c0[j], addmod(to_mod(e1[j], q_[i]), dm, q_[i]), q_[i]);
                    c1[j] = addmod(c1[j], to_mod(e2[j], q_[i]), q_[i]);
                }
                cipher.c0[i] = std::move(c0);
                cipher.c1[i] = std::move(c1);
            }
            ct.chunks.push_back(std::move(cipher));
        }
        return ct;
    }

    std::vector<double> decrypt(const SecretKey& sk, const EncryptedVector& ct) const {
        using namespace hedetail;
        if (sk.key_id != ct.key_id)
            throw KeyMismatch("ciphertext was produced under a different keypair");
        if (ct.depth > 1) throw DepthExceeded("multiplicative depth budget is 1");

        std::vector<std::int64_t> ints;
        if (ct.backend == HEBackend::Transparent) {
            ints = ct.plain;
        } else {
            std::size_t n = params_.ring_dim;
            ints.reserve(ct.chunks.size() * n);
            std::int64_t half_t = std::int64_t(t_ / 2);
            for (const auto& cipher : ct.chunks) {
                // v = c0 + c1 s (mod q), then m = round(t v / q) mod t
                LimbPoly v;
                for (int i = 0; i < 2; ++i) {
                    std::vector<u64> c1 = cipher.c1[i];
                    ntt_forward(c1, tab_q_[i]);
                    for (std::size_t j = 0; j < n; ++j)
                        c1[j] = mulmod(c1[j], sk.s_ntt[i][j], q_[i]);
                    ntt_inverse(c1, tab_q_[i]);
                    v[i].resize(n);
                    for (std::size_t j = 0; j < n; ++j)
                        v[i][j] = addmod(cipher.c0[i][j], c1[j], q_[i]);
                }
                std::vector<u64> m(n);
                for (std::size_t j = 0; j < n; ++j) {
                    u128 w = garner_q(v[0][j], v[1][j]);
                    mpz_class big = u128_to_mpz(w);
                    if (w > (q_u128_ >> 1)) big -= q_big_;
                    mpz_class r = t_big_ * big + q_half_;
                    mpz_fdiv_q(r.get_mpz_t(), r.get_mpz_t(), q_big_.get_mpz_t());
                    m[j] = mpz_fdiv_ui(r.get_mpz_t(), t_);
                }
                ntt_forward(m, tab_t_);  // back to slot order
                for (std::size_t j = 0; j < n; ++j) {
                    std::int64_t s = std::int64_t(m[j]);
                    if (m[j] > u64(half_t)) s = std::int64_t(m[j]) - std::int64_t(t_);
                    ints.push_back(s);
                }
            }
            ints.resize(ct.length);
        }
        return decode_fixed(ints, ct.scale);
    }

    // ---- homomorphic operations ----

    EncryptedVector he_add(const EncryptedVector& a, const EncryptedVector& b) const {
        return add_sub(a, b, false);
    }
    EncryptedVector he_sub(const EncryptedVector& a, const EncryptedVector& b) const {
        return add_sub(a, b, true);
    }

    EncryptedVector he_mul(const EncryptedVector& a, const EncryptedVector& b,
                           const RelinKey& rlk) const {
        using namespace hedetail;
        check_pair(a, b);
        if (a.depth != 0 || b.depth != 0)
            throw DepthExceeded("multiplicative depth budget is 1");
        if (a.scale != scale_base() || b.scale != scale_base())
            throw ScaleMismatch("multiplication requires both inputs at the base scale");
        if (rlk.key_id != a.key_id)
            throw KeyMismatch("relinearization key belongs to a different keypair");

        EncryptedVector out;
        out.backend = a.backend;
        out.length = a.length;
        out.scale = scale_squared();
        out.depth = 1;
        out.key_id = a.key_id;
        out.meta_std = std::sqrt((a.meta_std * a.meta_std + b.meta_std * b.meta_std) / 2.0);

        if (a.backend == HEBackend::Transparent) {
            out.plain.resize(a.plain.size());
            for (std::size_t i = 0; i < a.plain.size(); ++i)
                out.plain[i] = a.plain[i] * b.plain[i];
            return out;
        }
        out.chunks.resize(a.chunks.size());
        for (std::size_t c = 0; c < a.chunks.size(); ++c)
            out.chunks[c] = mul_chunk(a.chunks[c], b.chunks[c], rlk);
        return out;
    }

    // ---- noise ----

    EncryptedVector encrypt_noise(const PublicKey& pk, const std::vector<double>& noise,
                                  std::uint64_t target_scale, RngStream& rng) const {
        return encrypt(pk, noise, target_scale, rng);
    }

    // ---- serialization (simulated network transport) ----

    std::string serialize(const EncryptedVector& ct) const {
        std::string out;
        auto put64 = [&](std::uint64_t v) {
            for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
        };
        out += "FHE1";
        out.push_back(ct.backend == HEBackend::Bfv ? 1 : 0);
        put64(params_.ring_dim);
        put64(q_[0]);
        put64(q_[1]);
        put64(t_);
        put64(ct.scale);
        put64(std::uint64_t(ct.depth));
        put64(ct.key_id);
        std::uint64_t std_bits;
        std::memcpy(&std_bits, &ct.meta_std, 8);
        put64(std_bits);
        put64(ct.length);
        if (ct.backend == HEBackend::Bfv) {
            put64(ct.chunks.size());
            for (const auto& ch : ct.chunks)
                for (const auto* poly : {&ch.c0, &ch.c1})
                    for (int i = 0; i < 2; ++i)
                        for (std::uint64_t v : (*poly)[i]) put64(v);
        } else {
            put64(ct.plain.size());
            for (std::int64_t v : ct.plain) put64(std::uint64_t(v));
        }
        return out;
    }

    EncryptedVector parse(const std::string& bytes) const {
        std::size_t pos = 0;
        auto get64 = [&]() {
            if (pos + 8 > bytes.size()) throw ProtocolError("truncated ciphertext");
            std::uint64_t v = 0;
            for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(bytes[pos + std::size_t(i)])) << (8 * i);
            pos += 8;
            return v;
        };
        if (bytes.size() < 5 || bytes.compare(0, 4, "FHE1") != 0)
            throw ProtocolError("not a ciphertext");
        pos = 4;
        EncryptedVector ct;
        ct.backend = bytes[pos++] ? HEBackend::Bfv : HEBackend::Transparent;
        if (ct.backend != params_.backend) throw ProtocolError("ciphertext backend differs");
        if (get64() != params_.ring_dim || get64() != q_[0] || get64() != q_[1] || get64() != t_)
            throw ProtocolError("ciphertext parameters do not match this context");
        ct.scale = get64();
        ct.depth = int(get64());
        ct.key_id = get64();
        std::uint64_t std_bits = get64();
        std::memcpy(&ct.meta_std, &std_bits, 8);
        ct.length = get64();
        std::uint64_t count = get64();
        if (ct.backend == HEBackend::Bfv) {
            std::size_t n = params_.ring_dim;
            ct.chunks.resize(count);
            for (auto& ch : ct.chunks)
                for (auto* poly : {&ch.c0, &ch.c1})
                    for (int i = 0; i < 2; ++i) {
                        (*poly)[i].resize(n);
                        for (auto& v : (*poly)[i]) v = get64();
                    }
        } else {
            ct.plain.resize(count);
            for (auto& v : ct.plain) v = std::int64_t(get64());
        }
        return ct;
    }

  private:
    using u64 = hedetail::u64;
    using u128 = hedetail::u128;
    static constexpr std::size_t kAuxPrimes = 5;
    static constexpr int kRelinLogBase = 30;

    static std::string hi_str(u64 v) { return std::to_string(v); }

    static mpz_class u128_to_mpz(u128 v) {
        mpz_class hi(std::to_string(std::uint64_t(v >> 64)));
        mpz_class lo(std::to_string(std::uint64_t(v)));
        return (hi << 64) + lo;
    }

    static double sample_std(const std::vector<double>& v) {
        double m = 0;
        std::size_t cnt = 0;
        for (double x : v)
            if (std::isfinite(x)) {
                m += x;
                ++cnt;
            }
        if (cnt == 0) return 0;
        m /= double(cnt);
        double var = 0;
        for (double x : v)
            if (std::isfinite(x)) var += (x - m) * (x - m);
        return std::sqrt(var / double(cnt));
    }

    static std::vector<std::int64_t> ternary(std::size_t n, RngStream& rng) {
        std::vector<std::int64_t> v(n);
        for (auto& x : v) x = std::int64_t(rng.below(3)) - 1;
        return v;
    }
    // centered binomial with parameter 2: range [-2, 2], variance 1
    static std::vector<std::int64_t> cbd(std::size_t n, RngStream& rng) {
        std::vector<std::int64_t> v(n);
        for (auto& x : v)
            x = std::int64_t(rng.below(2)) + std::int64_t(rng.below(2)) -
                std::int64_t(rng.below(2)) - std::int64_t(rng.below(2));
        return v;
    }

    static u64 to_mod(std::int64_t v, u64 p) { return v >= 0 ? u64(v) : p - u64(-v); }

    LimbPoly signed_poly(const std::vector<std::int64_t>& s) const {
        LimbPoly out;
        for (int i = 0; i < 2; ++i) {
            out[i].resize(s.size());
            for (std::size_t j = 0; j < s.size(); ++j) out[i][j] = to_mod(s[j], q_[i]);
        }
        return out;
    }

    LimbPoly uniform_poly(RngStream& rng) const {
        LimbPoly out;
        for (int i = 0; i < 2; ++i) {
            out[i].resize(params_.ring_dim);
            for (auto& v : out[i]) v = rng.below(q_[i]);
        }
        return out;
    }

    LimbPoly to_ntt(LimbPoly p) const {
        for (int i = 0; i < 2; ++i) hedetail::ntt_forward(p[i], tab_q_[i]);
        return p;
    }

    // coefficient-domain poly times an NTT-domain poly, result in coefficients
    LimbPoly mul_ntt_plain(const LimbPoly& coeff, const LimbPoly& ntt) const {
        using namespace hedetail;
        LimbPoly out;
        for (int i = 0; i < 2; ++i) {
            out[i] = coeff[i];
            ntt_forward(out[i], tab_q_[i]);
            for (std::size_t j = 0; j < out[i].size(); ++j)
                out[i][j] = mulmod(out[i][j], ntt[i][j], q_[i]);
            ntt_inverse(out[i], tab_q_[i]);
        }
        return out;
    }

    u128 garner_q(u64 x0, u64 x1) const {
        using namespace hedetail;
        u64 d = submod(x1 % q_[1], x0 % q_[1], q_[1]);
        u64 y = mulmod(d, inv_q0_mod_q1_, q_[1]);
        return u128(x0) + u128(q_[0]) * y;
    }

    void check_pair(const EncryptedVector& a, const EncryptedVector& b) const {
        if (a.backend != b.backend || a.backend != params_.backend)
            throw ProtocolError("mixed or foreign backends in one operation");
        if (a.length != b.length) throw ParamError("ciphertext lengths differ");
        if (a.key_id != b.key_id) throw KeyMismatch("operands were encrypted under different keys");
    }

    EncryptedVector add_sub(const EncryptedVector& a, const EncryptedVector& b, bool sub) const {
        using namespace hedetail;
        check_pair(a, b);
        if (a.scale != b.scale) throw ScaleMismatch("add/sub requires equal scales");
        EncryptedVector out;
        out.backend = a.backend;
        out.length = a.length;
        out.scale = a.scale;
        out.depth = std::max(a.depth, b.depth);
        out.key_id = a.key_id;
        out.meta_std = std::sqrt((a.meta_std * a.meta_std + b.meta_std * b.meta_std) / 2.0);
        if (a.backend == HEBackend::Transparent) {
            out.plain.resize(a.plain.size());
            for (std::size_t i = 0; i < a.plain.size(); ++i)
                out.plain[i] = sub ? a.plain[i] - b.plain[i] : a.plain[i] + b.plain[i];
            return out;
        }
        out.chunks.resize(a.chunks.size());
        for (std::size_t c = 0; c < a.chunks.size(); ++c) {
            for (int i = 0; i < 2; ++i) {
                std::size_t n = a.chunks[c].c0[i].size();
                out.chunks[c].c0[i].resize(n);
                out.chunks[c].c1[i].resize(n);
                for (std::size_t j = 0; j < n; ++j) {
                    if (sub) {
                        out.chunks[c].c0[i][j] =
                            submod(a.chunks[c].c0[i][j], b.chunks[c].c0[i][j], q_[i]);
                        out.chunks[c].c1[i][j] =
                            submod(a.chunks[c].c1[i][j], b.chunks[c].c1[i][j], q_[i]);
                    } else {
                        out.chunks[c].c0[i][j] =
                            addmod(a.chunks[c].c0[i][j], b.chunks[c].c0[i][j], q_[i]);
                        out.chunks[c].c1[i][j] =
                            addmod(a.chunks[c].c1[i][j], b.chunks[c].c1[i][j], q_[i]);
                    }
                }
            }
        }
        return out;
    }

    // exact BFV multiplication of one chunk: tensor over the integers via the
    // auxiliary CRT basis, scale by t/q with exact rounding, relinearize
    BfvCipher mul_chunk(const BfvCipher& A, const BfvCipher& B, const RelinKey& rlk) const {
        using namespace hedetail;
        std::size_t n = params_.ring_dim;

        // inputs as centered integers mod each aux prime, NTT domain
        std::array<std::array<std::vector<u64>, 4>, kAuxPrimes> hat;
        for (std::size_t j = 0; j < kAuxPrimes; ++j) {
            const std::vector<u64>* srcs[4][2] = {{&A.c0[0], &A.c0[1]},
                                                  {&A.c1[0], &A.c1[1]},
                                                  {&B.c0[0], &B.c0[1]},
                                                  {&B.c1[0], &B.c1[1]}};
            for (int k = 0; k < 4; ++k) {
                std::vector<u64> poly(n);
                for (std::size_t i = 0; i < n; ++i) {
                    u128 v = garner_q((*srcs[k][0])[i], (*srcs[k][1])[i]);
                    u64 r = u64(v % aux_[j]);
                    if (v > (q_u128_ >> 1)) r = submod(r, q_mod_aux_[j], aux_[j]);
                    poly[i] = r;
                }
                ntt_forward(poly, tab_aux_[j]);
                hat[j][std::size_t(k)] = std::move(poly);
            }
        }

        // d0 = a0 b0, d1 = a0 b1 + a1 b0, d2 = a1 b1 (exact, via CRT)
        std::array<std::array<std::vector<u64>, 3>, kAuxPrimes> d;
        for (std::size_t j = 0; j < kAuxPrimes; ++j) {
            u64 p = aux_[j];
            d[j][0].resize(n);
            d[j][1].resize(n);
            d[j][2].resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                d[j][0][i] = mulmod(hat[j][0][i], hat[j][2][i], p);
                d[j][1][i] = addmod(mulmod(hat[j][0][i], hat[j][3][i], p),
                                    mulmod(hat[j][1][i], hat[j][2][i], p), p);
                d[j][2][i] = mulmod(hat[j][1][i], hat[j][3][i], p);
            }
            for (int k = 0; k < 3; ++k) ntt_inverse(d[j][std::size_t(k)], tab_aux_[j]);
        }

        // reconstruct each coefficient, rescale by t/q with exact rounding,
        // and re-reduce into the two ciphertext limbs
        std::array<LimbPoly, 3> e;
        for (int k = 0; k < 3; ++k)
            for (int i = 0; i < 2; ++i) e[std::size_t(k)][i].resize(n);
        std::array<u64, kAuxPrimes> digits;
        for (std::size_t i = 0; i < n; ++i) {
            for (int k = 0; k < 3; ++k) {
                // Garner mixed-radix digits over the aux basis
                for (std::size_t j = 0; j < kAuxPrimes; ++j) {
                    u64 p = aux_[j];
                    u64 acc = 0;
                    for (std::size_t l = 0; l < j; ++l)
                        acc = addmod(acc, mulmod(digits[l] % p, aux_prefix_mod_[j][l], p), p);
                    u64 x = submod(d[j][std::size_t(k)][i] % p, acc, p);
                    digits[j] = mulmod(x, aux_prefix_inv_[j], p);
                }
                mpz_class big = 0;
                for (std::size_t j = kAuxPrimes; j-- > 0;) {
                    big *= mpz_class(hi_str(aux_[j]));
                    big += mpz_class(hi_str(digits[j]));
                }
                if (big > aux_half_) big -= aux_big_;
                mpz_class r = t_big_ * big + q_half_;
                mpz_fdiv_q(r.get_mpz_t(), r.get_mpz_t(), q_big_.get_mpz_t());
                for (int limb = 0; limb < 2; ++limb)
                    e[std::size_t(k)][limb][i] = mpz_fdiv_ui(r.get_mpz_t(), q_[limb]);
            }
        }

        // relinearize e2 down onto (c0, c1) using base-2^30 digits
        BfvCipher out;
        out.c0 = e[0];
        out.c1 = e[1];
        std::array<std::array<std::vector<u64>, 2>, 2> acc;  // [component][limb], NTT domain
        for (int comp = 0; comp < 2; ++comp)
            for (int i = 0; i < 2; ++i) acc[std::size_t(comp)][std::size_t(i)].assign(n, 0);

        std::vector<std::vector<u64>> digit_polys;
        digit_polys.assign(std::size_t(relin_digits_), std::vector<u64>(n));
        constexpr u64 digit_mask = (u64(1) << kRelinLogBase) - 1;
        for (std::size_t i = 0; i < n; ++i) {
            u128 v = garner_q(e[2][0][i], e[2][1][i]);
            for (int dgt = 0; dgt < relin_digits_; ++dgt) {
                digit_polys[std::size_t(dgt)][i] = u64(v) & digit_mask;
                v >>= kRelinLogBase;
            }
        }
        for (int dgt = 0; dgt < relin_digits_; ++dgt) {
            for (int i = 0; i < 2; ++i) {
                std::vector<u64> hat_digit = digit_polys[std::size_t(dgt)];
                for (auto& v : hat_digit) v %= q_[i];
                ntt_forward(hat_digit, tab_q_[i]);
                const auto& rk0 = rlk.rk0_ntt[std::size_t(dgt)][i];
                const auto& rk1 = rlk.rk1_ntt[std::size_t(dgt)][i];
                for (std::size_t j = 0; j < n; ++j) {
                    acc[0][std::size_t(i)][j] =
                        addmod(acc[0][std::size_t(i)][j], mulmod(hat_digit[j], rk0[j], q_[i]), q_[i]);
                    acc[1][std::size_t(i)][j] =
                        addmod(acc[1][std::size_t(i)][j], mulmod(hat_digit[j], rk1[j], q_[i]), q_[i]);
                }
            }
        }
        for (int i = 0; i < 2; ++i) {
            ntt_inverse(acc[0][std::size_t(i)], tab_q_[i]);
            ntt_inverse(acc[1][std::size_t(i)], tab_q_[i]);
            for (std::size_t j = 0; j < n; ++j) {
                out.c0[i][j] = hedetail::addmod(out.c0[i][j], acc[0][std::size_t(i)][j], q_[i]);
                out.c1[i][j] = hedetail::addmod(out.c1[i][j], acc[1][std::size_t(i)][j], q_[i]);
            }
        }
        return out;
    }

    HEParams params_;
    u64 t_ = 0;
    std::array<u64, 2> q_{};
    std::array<u64, kAuxPrimes> aux_{};
    hedetail::NttTables tab_t_;
    std::array<hedetail::NttTables, 2> tab_q_;
    std::array<hedetail::NttTables, kAuxPrimes> tab_aux_;
    std::array<u64, 2> delta_bfv_{};
    mpz_class q_big_, q_half_, t_big_, aux_big_, aux_half_;
    u64 inv_q0_mod_q1_ = 0;
    u128 q_u128_ = 0;
    std::array<u64, kAuxPrimes> q_mod_aux_{};
    std::array<std::array<u64, kAuxPrimes>, kAuxPrimes> aux_prefix_mod_{};
    std::array<u64, kAuxPrimes> aux_prefix_inv_{};
    std::array<u64, kAuxPrimes> aux_prefix_full_{};
    int relin_digits_ = 0;
};

// i.i.d. Laplace(0, b) by inverse CDF on Uniform(-1/2, 1/2)
inline std::vector<double> sample_laplace(double b, std::size_t n, RngStream& rng) {
    if (!(b > 0)) throw ParamError("laplace scale must be positive");
    std::vector<double> out(n);
    for (auto& x : out) {
        double u;
        do {
            u = rng.uniform() - 0.5;
        } while (1.0 - 2.0 * std::fabs(u) <= 0.0);
        double sign = u < 0 ? -1.0 : 1.0;
        x = -b * sign * std::log(1.0 - 2.0 * std::fabs(u));
    }
    return out;
}

}  // namespace flafe
