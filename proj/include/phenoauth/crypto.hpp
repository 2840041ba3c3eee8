#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/kdf.h>
#include <openssl/sha.h>

#include "phenoauth/bytes.hpp"

namespace phenoauth::crypto {

inline constexpr size_t kDigestSize = 32;
inline constexpr size_t kKeySize = 32;
inline constexpr size_t kTagSize = 16;
inline constexpr size_t kNonceSize = 12;

/// Extract-then-expand output bound for a 32-byte digest: 255 * 32 bytes.
inline constexpr size_t kKdfMaxBytes = 255 * kDigestSize;

using Digest = std::array<uint8_t, kDigestSize>;

namespace detail {

#if defined(__x86_64__) || defined(__i386__)
__attribute__((target("avx"))) inline void vzeroupper_call() { __builtin_ia32_vzeroupper(); }

/// libcrypto's vectorized cipher kernels can return with dirty upper SIMD
/// register state; legacy-encoded SSE math (libm exp in the simulator's read
/// loops) then pays a transition penalty on every instruction until the
/// state is cleared. Harmless no-op when the state is already clean.
inline void clear_simd_state() {
    static const bool has_avx = __builtin_cpu_supports("avx");
    if (has_avx) vzeroupper_call();
}
#else
inline void clear_simd_state() {}
#endif

}  // namespace detail

struct CryptoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LengthExceeded : std::length_error {
    using std::length_error::length_error;
};

struct NonceReuse : std::logic_error {
    using std::logic_error::logic_error;
};

/// Variable-length secret material; wiped when it goes out of scope.
class SecretBytes {
public:
    SecretBytes() = default;
    explicit SecretBytes(Bytes b) : data_(std::move(b)) {}
    explicit SecretBytes(size_t n) : data_(n, 0) {}
    SecretBytes(const SecretBytes&) = default;
    SecretBytes& operator=(const SecretBytes&) = default;
    SecretBytes(SecretBytes&& o) noexcept { swap(o); }
    SecretBytes& operator=(SecretBytes&& o) noexcept {
        swap(o);
        return *this;
    }
    ~SecretBytes() { wipe(); }

    void swap(SecretBytes& o) noexcept { data_.swap(o.data_); }
    void wipe() {
        if (!data_.empty()) OPENSSL_cleanse(data_.data(), data_.size());
        data_.clear();
    }

    const Bytes& bytes() const { return data_; }
    uint8_t* data() { return data_.data(); }
    const uint8_t* data() const { return data_.data(); }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool operator==(const SecretBytes& o) const {
        return data_.size() == o.data_.size() &&
               (data_.empty() || CRYPTO_memcmp(data_.data(), o.data_.data(), data_.size()) == 0);
    }

private:
    Bytes data_;
};

enum class KeyRole : uint8_t { SessionKey, Subkey };

/// 256-bit AEAD key. Never serialized into any wire message; wiped on
/// destruction (session teardown drops these by value).
class SymmetricKey {
public:
    SymmetricKey() : role_(KeyRole::Subkey) { k_.fill(0); }
    SymmetricKey(const std::array<uint8_t, kKeySize>& k, KeyRole role) : k_(k), role_(role) {}

    static SymmetricKey from_secret(const SecretBytes& s, KeyRole role) {
        if (s.size() != kKeySize) throw std::invalid_argument("key material must be 32 bytes");
        std::array<uint8_t, kKeySize> k{};
        std::memcpy(k.data(), s.data(), kKeySize);
        return SymmetricKey(k, role);
    }

    ~SymmetricKey() { OPENSSL_cleanse(k_.data(), k_.size()); }
    SymmetricKey(const SymmetricKey&) = default;
    SymmetricKey& operator=(const SymmetricKey&) = default;

    const std::array<uint8_t, kKeySize>& raw() const { return k_; }
    KeyRole role() const { return role_; }

    bool operator==(const SymmetricKey& o) const {
        return CRYPTO_memcmp(k_.data(), o.k_.data(), kKeySize) == 0;
    }

private:
    std::array<uint8_t, kKeySize> k_;
    KeyRole role_;
};

/// Session-scoped AEAD counter. The initiating side of a session uses even
/// values, the responding side odd ones, so the two directions can never
/// collide under the same key. Counters reset with each new session key.
struct NonceCounter {
    uint64_t value = 0;

    static NonceCounter initiator(uint64_t k) { return {2 * k}; }
    static NonceCounter responder(uint64_t k) { return {2 * k + 1}; }

    std::array<uint8_t, kNonceSize> to_nonce() const {
        std::array<uint8_t, kNonceSize> n{};
        for (int i = 0; i < 8; ++i) n[4 + i] = static_cast<uint8_t>(value >> (8 * i));
        return n;
    }
};

struct AeadOutput {
    Bytes ciphertext;
    std::array<uint8_t, kTagSize> tag{};

    bool operator==(const AeadOutput& o) const { return ciphertext == o.ciphertext && tag == o.tag; }
};

inline Digest hash(const uint8_t* data, size_t n) {
    Digest d{};
    SHA256(data, n, d.data());
    detail::clear_simd_state();
    return d;
}

inline Digest hash(const Bytes& data) { return hash(data.data(), data.size()); }

inline Digest hash_concat(const Bytes& a, const Bytes& b) {
    Bytes joined;
    joined.reserve(a.size() + b.size());
    append(joined, a);
    append(joined, b);
    return hash(joined);
}

/// HKDF (extract-then-expand, HMAC-SHA-256). length_bits must be a multiple
/// of 8 and at most 255 * 32 bytes worth; seed must be nonempty.
inline SecretBytes kdf(const Bytes& seed, size_t length_bits, const Bytes& salt,
                       const std::string& context) {
    if (seed.empty()) throw std::invalid_argument("kdf seed must be nonempty");
    if (length_bits == 0 || length_bits % 8 != 0)
        throw std::invalid_argument("kdf length must be a positive multiple of 8 bits");
    size_t out_len = length_bits / 8;
    if (out_len > kKdfMaxBytes) throw LengthExceeded("kdf output exceeds extract-then-expand bound");

    std::unique_ptr<EVP_PKEY_CTX, decltype(&EVP_PKEY_CTX_free)> ctx(
        EVP_PKEY_CTX_new_id(EVP_PKEY_HKDF, nullptr), EVP_PKEY_CTX_free);
    if (!ctx) throw CryptoError("HKDF context allocation failed");
    if (EVP_PKEY_derive_init(ctx.get()) <= 0 ||
        EVP_PKEY_CTX_set_hkdf_md(ctx.get(), EVP_sha256()) <= 0 ||
        EVP_PKEY_CTX_set1_hkdf_salt(ctx.get(), salt.data(), static_cast<int>(salt.size())) <= 0 ||
        EVP_PKEY_CTX_set1_hkdf_key(ctx.get(), seed.data(), static_cast<int>(seed.size())) <= 0 ||
        EVP_PKEY_CTX_add1_hkdf_info(ctx.get(), reinterpret_cast<const uint8_t*>(context.data()),
                                    static_cast<int>(context.size())) <= 0)
        throw CryptoError("HKDF parameter setup failed");

    SecretBytes out{Bytes(out_len, 0)};
    size_t got = out_len;
    if (EVP_PKEY_derive(ctx.get(), out.data(), &got) <= 0 || got != out_len)
        throw CryptoError("HKDF derive failed");
    detail::clear_simd_state();
    return out;
}

/// Low-level ChaCha20-Poly1305 seal with an explicit 96-bit nonce; exists so
/// published test vectors can be checked against the exact primitive the
/// protocol uses.
inline AeadOutput aead_seal_raw(const std::array<uint8_t, kKeySize>& key,
                                const std::array<uint8_t, kNonceSize>& nonce, const Bytes& ad,
                                const Bytes& m) {
    std::unique_ptr<EVP_CIPHER_CTX, decltype(&EVP_CIPHER_CTX_free)> ctx(EVP_CIPHER_CTX_new(),
                                                                        EVP_CIPHER_CTX_free);
    if (!ctx) throw CryptoError("cipher context allocation failed");
    if (EVP_EncryptInit_ex(ctx.get(), EVP_chacha20_poly1305(), nullptr, nullptr, nullptr) != 1 ||
        EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_AEAD_SET_IVLEN, kNonceSize, nullptr) != 1 ||
        EVP_EncryptInit_ex(ctx.get(), nullptr, nullptr, key.data(), nonce.data()) != 1)
        throw CryptoError("aead encrypt init failed");

    int len = 0;
    if (!ad.empty() && EVP_EncryptUpdate(ctx.get(), nullptr, &len, ad.data(), static_cast<int>(ad.size())) != 1)
        throw CryptoError("aead aad update failed");

    AeadOutput out;
    out.ciphertext.resize(m.size());
    if (!m.empty() &&
        EVP_EncryptUpdate(ctx.get(), out.ciphertext.data(), &len, m.data(), static_cast<int>(m.size())) != 1)
        throw CryptoError("aead encrypt update failed");
    int fin = 0;
    if (EVP_EncryptFinal_ex(ctx.get(), out.ciphertext.data() + len, &fin) != 1)
        throw CryptoError("aead encrypt final failed");
    if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_AEAD_GET_TAG, kTagSize, out.tag.data()) != 1)
        throw CryptoError("aead tag extraction failed");
    detail::clear_simd_state();
    return out;
}

inline std::optional<Bytes> aead_open_raw(const std::array<uint8_t, kKeySize>& key,
                                          const std::array<uint8_t, kNonceSize>& nonce, const Bytes& ad,
                                          const AeadOutput& c) {
    std::unique_ptr<EVP_CIPHER_CTX, decltype(&EVP_CIPHER_CTX_free)> ctx(EVP_CIPHER_CTX_new(),
                                                                        EVP_CIPHER_CTX_free);
    if (!ctx) throw CryptoError("cipher context allocation failed");
    if (EVP_DecryptInit_ex(ctx.get(), EVP_chacha20_poly1305(), nullptr, nullptr, nullptr) != 1 ||
        EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_AEAD_SET_IVLEN, kNonceSize, nullptr) != 1 ||
        EVP_DecryptInit_ex(ctx.get(), nullptr, nullptr, key.data(), nonce.data()) != 1)
        throw CryptoError("aead decrypt init failed");

    int len = 0;
    if (!ad.empty() && EVP_DecryptUpdate(ctx.get(), nullptr, &len, ad.data(), static_cast<int>(ad.size())) != 1)
        return std::nullopt;

    Bytes m(c.ciphertext.size());
    if (!c.ciphertext.empty() &&
        EVP_DecryptUpdate(ctx.get(), m.data(), &len, c.ciphertext.data(),
                          static_cast<int>(c.ciphertext.size())) != 1)
        return std::nullopt;

    std::array<uint8_t, kTagSize> tag = c.tag;
    if (EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_AEAD_SET_TAG, kTagSize, tag.data()) != 1)
        throw CryptoError("aead tag set failed");
    int fin = 0;
    bool ok = EVP_DecryptFinal_ex(ctx.get(), m.data() + len, &fin) == 1;
    detail::clear_simd_state();
    if (!ok) return std::nullopt;
    return m;
}

inline AeadOutput aead_encrypt(const SymmetricKey& key, NonceCounter n, const Bytes& ad, const Bytes& m) {
    return aead_seal_raw(key.raw(), n.to_nonce(), ad, m);
}

/// Returns the plaintext exactly when (key, n, ad, ciphertext, tag) match an
/// encryption; nullopt signals tampering or a wrong key (AuthFailure).
inline std::optional<Bytes> aead_decrypt(const SymmetricKey& key, NonceCounter n, const Bytes& ad,
                                         const AeadOutput& c) {
    return aead_open_raw(key.raw(), n.to_nonce(), ad, c);
}

/// Re-encrypts the associated data under (key, n) and compares ciphertext and
/// tag in constant time. Tag verification therefore costs one AEAD.Enc, which
/// is what keeps the per-role cost model symmetric.
inline bool aead_tag_matches(const SymmetricKey& key, NonceCounter n, const Bytes& ad, const Bytes& m,
                             const AeadOutput& received) {
    AeadOutput again = aead_encrypt(key, n, ad, m);
    if (again.ciphertext.size() != received.ciphertext.size()) return false;
    int diff = CRYPTO_memcmp(again.tag.data(), received.tag.data(), kTagSize);
    if (!again.ciphertext.empty())
        diff |= CRYPTO_memcmp(again.ciphertext.data(), received.ciphertext.data(), again.ciphertext.size());
    return diff == 0;
}

/// Per-session encryption handle that refuses to reuse a counter value under
/// its key. The protocol proper only ever uses counters 0 and 1; this guard
/// backs the harness-level nonce-reuse detection.
class SessionCipher {
public:
    explicit SessionCipher(SymmetricKey key) : key_(std::move(key)) {}

    AeadOutput encrypt(NonceCounter n, const Bytes& ad, const Bytes& m) {
        if (any_used_ && n.value <= max_seen_)
            throw NonceReuse("counter reused or not strictly increasing under one session key");
        any_used_ = true;
        max_seen_ = n.value;
        return aead_encrypt(key_, n, ad, m);
    }

    const SymmetricKey& key() const { return key_; }

private:
    SymmetricKey key_;
    bool any_used_ = false;
    uint64_t max_seen_ = 0;
};

}  // namespace phenoauth::crypto
