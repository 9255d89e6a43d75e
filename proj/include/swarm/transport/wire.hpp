#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "swarm/common.hpp"
#include "swarm/quant.hpp"
#include "swarm/tensor.hpp"

namespace swarm::transport {

enum class MsgType : uint8_t {
    Ping = 0x01,
    Info = 0x02,
    OpenSession = 0x10,
    Step = 0x11,
    CloseSession = 0x12,
    Forward = 0x20,
    Backward = 0x21,
    Announce = 0x30,
    Lookup = 0x31,
    Gossip = 0x32,
    Error = 0x7F,
};

inline constexpr uint8_t kMagic0 = 0x50;
inline constexpr uint8_t kMagic1 = 0x54;
inline constexpr uint8_t kProtocolVersion = 1;
inline constexpr size_t kFrameHeaderSize = 16;
inline constexpr uint32_t kMaxPayload = 64u << 20;

/// Big-endian integer / little-endian float writer.
class ByteWriter {
public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v);
    void u32(uint32_t v);
    void u64(uint64_t v);
    void f32le(float v);
    void bytes(std::span<const uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void str(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    const std::vector<uint8_t>& buffer() const { return buf_; }
    std::vector<uint8_t> take() { return std::move(buf_); }
    size_t size() const { return buf_.size(); }

private:
    std::vector<uint8_t> buf_;
};

/// Bounds-checked reader; running past the end throws ProtocolError.
class ByteReader {
public:
    explicit ByteReader(std::span<const uint8_t> b) : buf_(b) {}
    uint8_t u8();
    uint16_t u16();
    uint32_t u32();
    uint64_t u64();
    float f32le();
    std::span<const uint8_t> bytes(size_t n);
    std::string str(size_t n);
    std::string rest_str() { return str(remaining()); }
    size_t remaining() const { return buf_.size() - pos_; }
    void expect_end() const;

private:
    std::span<const uint8_t> buf_;
    size_t pos_ = 0;
};

struct Frame {
    MsgType type = MsgType::Ping;
    uint64_t request_id = 0;
    std::vector<uint8_t> payload;
    bool operator==(const Frame&) const = default;
};

struct FrameHeader {
    MsgType type;
    uint64_t request_id;
    uint32_t payload_len;
};

std::vector<uint8_t> encode_frame(MsgType type, uint64_t request_id, std::span<const uint8_t> payload);
inline std::vector<uint8_t> encode_frame(const Frame& f) { return encode_frame(f.type, f.request_id, f.payload); }
/// Validates magic, version and the payload cap.
FrameHeader decode_frame_header(std::span<const uint8_t> header);
/// Decodes exactly one frame; truncated or trailing bytes are a ProtocolError.
Frame decode_frame(std::span<const uint8_t> bytes);

enum class ErrorCode : uint16_t {
    BadRequest = 1,
    UnknownType = 2,
    Busy = 3,
    Desync = 4,
    UnknownSession = 5,
    DuplicateSession = 6,
    UnknownTape = 7,
    WrongRange = 8,
    Capacity = 9,
    Internal = 10,
};

std::string to_string(ErrorCode c);

std::vector<uint8_t> encode_error(ErrorCode code, std::string_view message);
std::pair<ErrorCode, std::string> decode_error(std::span<const uint8_t> payload);

/// An ERROR frame received in reply to a request.
class RemoteError : public Error {
public:
    RemoteError(ErrorCode c, const std::string& msg) : Error(to_string(c) + ": " + msg), code(c) {}
    ErrorCode code;
};

enum class Encoding : uint8_t { F32 = 0, Int8 = 1 };

using quant::kDefaultBlockSize;

void write_tensor(ByteWriter& w, const Tensor& t, Encoding enc, uint32_t block_size = kDefaultBlockSize);
Tensor read_tensor(ByteReader& r);
std::vector<uint8_t> encode_tensor(const Tensor& t, Encoding enc, uint32_t block_size = kDefaultBlockSize);
Tensor decode_tensor(std::span<const uint8_t> bytes);
/// Byte count write_tensor would produce.
size_t encoded_tensor_size(std::span<const uint32_t> shape, Encoding enc, uint32_t block_size = kDefaultBlockSize);

}  // namespace swarm::transport
