#ifndef SOA_UTIL_DIGEST_H_
#define SOA_UTIL_DIGEST_H_

#include <span>
#include <string>
#include <string_view>

namespace soa {

// Hex-encoded SHA-256.
std::string Sha256Hex(std::span<const unsigned char> bytes);
std::string Sha256Hex(std::string_view text);

}  // namespace soa

#endif  // SOA_UTIL_DIGEST_H_
