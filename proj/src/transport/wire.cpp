#include "swarm/transport/wire.hpp"

#include <bit>
#include <cstring>
#include <limits>

#include "swarm/quant.hpp"

namespace swarm::transport {

void ByteWriter::u16(uint16_t v) {
    u8(uint8_t(v >> 8));
    u8(uint8_t(v));
}

void ByteWriter::u32(uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) u8(uint8_t(v >> s));
}

void ByteWriter::u64(uint64_t v) {
    for (int s = 56; s >= 0; s -= 8) u8(uint8_t(v >> s));
}

void ByteWriter::f32le(float v) {
    const uint32_t b = std::bit_cast<uint32_t>(v);
    for (int s = 0; s < 32; s += 8) u8(uint8_t(b >> s));
}

std::span<const uint8_t> ByteReader::bytes(size_t n) {
    if (n > remaining()) throw ProtocolError("truncated message");
    auto out = buf_.subspan(pos_, n);
    pos_ += n;
    return out;
}

uint8_t ByteReader::u8() { return bytes(1)[0]; }

uint16_t ByteReader::u16() {
    auto b = bytes(2);
    return uint16_t(b[0] << 8 | b[1]);
}

uint32_t ByteReader::u32() {
    auto b = bytes(4);
    uint32_t v = 0;
    for (uint8_t x : b) v = v << 8 | x;
    return v;
}

uint64_t ByteReader::u64() {
    auto b = bytes(8);
    uint64_t v = 0;
    for (uint8_t x : b) v = v << 8 | x;
    return v;
}

float ByteReader::f32le() {
    auto b = bytes(4);
    const uint32_t v = uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
    return std::bit_cast<float>(v);
}

std::string ByteReader::str(size_t n) {
    auto b = bytes(n);
    return std::string(b.begin(), b.end());
}

void ByteReader::expect_end() const {
    if (remaining() != 0) throw ProtocolError("unexpected trailing bytes");
}

std::vector<uint8_t> encode_frame(MsgType type, uint64_t request_id, std::span<const uint8_t> payload) {
    if (payload.size() >= kMaxPayload) throw InputError("frame payload exceeds 64 MiB");
    ByteWriter w;
    w.u8(kMagic0);
    w.u8(kMagic1);
    w.u8(kProtocolVersion);
    w.u8(uint8_t(type));
    w.u64(request_id);
    w.u32(uint32_t(payload.size()));
    w.bytes(payload);
    return w.take();
}

FrameHeader decode_frame_header(std::span<const uint8_t> header) {
    ByteReader r(header.first(std::min(header.size(), kFrameHeaderSize)));
    if (header.size() < kFrameHeaderSize) throw ProtocolError("truncated frame header");
    if (r.u8() != kMagic0 || r.u8() != kMagic1) throw ProtocolError("bad frame magic");
    if (const uint8_t v = r.u8(); v != kProtocolVersion) throw ProtocolError("unsupported protocol version " + std::to_string(v));
    FrameHeader h;
    h.type = MsgType(r.u8());
    h.request_id = r.u64();
    h.payload_len = r.u32();
    if (h.payload_len >= kMaxPayload) throw ProtocolError("frame payload exceeds 64 MiB");
    return h;
}

Frame decode_frame(std::span<const uint8_t> bytes) {
    const FrameHeader h = decode_frame_header(bytes);
    if (bytes.size() < kFrameHeaderSize + h.payload_len) throw ProtocolError("truncated frame payload");
    if (bytes.size() > kFrameHeaderSize + h.payload_len) throw ProtocolError("trailing bytes after frame");
    auto p = bytes.subspan(kFrameHeaderSize);
    return Frame{h.type, h.request_id, std::vector<uint8_t>(p.begin(), p.end())};
}

std::string to_string(ErrorCode c) {
    switch (c) {
        case ErrorCode::BadRequest: return "BAD_REQUEST";
        case ErrorCode::UnknownType: return "UNKNOWN_TYPE";
        case ErrorCode::Busy: return "BUSY";
        case ErrorCode::Desync: return "DESYNC";
        case ErrorCode::UnknownSession: return "UNKNOWN_SESSION";
        case ErrorCode::DuplicateSession: return "DUPLICATE_SESSION";
        case ErrorCode::UnknownTape: return "UNKNOWN_TAPE";
        case ErrorCode::WrongRange: return "WRONG_RANGE";
        case ErrorCode::Capacity: return "CAPACITY";
        case ErrorCode::Internal: return "INTERNAL";
    }
    return "ERROR_" + std::to_string(uint16_t(c));
}

std::vector<uint8_t> encode_error(ErrorCode code, std::string_view message) {
    ByteWriter w;
    w.u16(uint16_t(code));
    w.str(message);
    return w.take();
}

std::pair<ErrorCode, std::string> decode_error(std::span<const uint8_t> payload) {
    ByteReader r(payload);
    const auto code = ErrorCode(r.u16());
    return {code, r.rest_str()};
}

size_t encoded_tensor_size(std::span<const uint32_t> shape, Encoding enc, uint32_t block_size) {
    const size_t n = shape_numel(shape);
    size_t size = 2 + 4 * shape.size();
    if (enc == Encoding::F32) return size + 4 * n;
    const size_t blocks = (n + block_size - 1) / block_size;
    return size + 4 + 4 * blocks + n;
}

void write_tensor(ByteWriter& w, const Tensor& t, Encoding enc, uint32_t block_size) {
    if (t.shape.size() > 255) throw InputError("tensor has too many dims");
    if (shape_numel(t.shape) != t.numel()) throw InputError("tensor shape does not match data");
    if (!all_finite(t.data)) throw InputError("tensor contains non-finite values");
    w.u8(uint8_t(enc));
    w.u8(uint8_t(t.shape.size()));
    for (uint32_t d : t.shape) w.u32(d);
    if (enc == Encoding::F32) {
        for (float v : t.data) w.f32le(v);
        return;
    }
    if (enc != Encoding::Int8) throw InputError("unknown tensor encoding");
    const auto q = quant::quantize_blockwise(t, block_size);
    w.u32(q.block_size);
    for (float s : q.scales) w.f32le(s);
    for (int8_t c : q.codes) w.u8(uint8_t(c));
}

Tensor read_tensor(ByteReader& r) {
    const auto enc = Encoding(r.u8());
    const uint8_t ndim = r.u8();
    std::vector<uint32_t> shape(ndim);
    size_t n = 1;
    for (auto& d : shape) {
        d = r.u32();
        if (d != 0 && n > std::numeric_limits<uint32_t>::max() / d) throw InputError("tensor dims product overflows");
        n *= d;
    }
    if (enc == Encoding::F32) {
        if (n * 4 > r.remaining()) throw ProtocolError("truncated f32 tensor");
        Tensor t = Tensor::zeros(shape);
        for (float& v : t.data) v = r.f32le();
        return t;
    }
    if (enc != Encoding::Int8) throw ProtocolError("unknown tensor encoding " + std::to_string(int(enc)));
    quant::QuantizedBlockwise q;
    q.shape = shape;
    q.block_size = r.u32();
    if (q.block_size == 0) throw ProtocolError("zero quantization block size");
    const size_t blocks = (n + q.block_size - 1) / q.block_size;
    if (4 * blocks + n > r.remaining()) throw ProtocolError("truncated int8 tensor");
    q.scales.resize(blocks);
    for (float& s : q.scales) s = r.f32le();
    q.codes.resize(n);
    auto codes = r.bytes(n);
    std::memcpy(q.codes.data(), codes.data(), n);
    try {
        return quant::dequantize_blockwise(q);
    } catch (const CorruptionError& e) {
        throw ProtocolError(e.what());
    }
}

std::vector<uint8_t> encode_tensor(const Tensor& t, Encoding enc, uint32_t block_size) {
    ByteWriter w;
    write_tensor(w, t, enc, block_size);
    return w.take();
}

Tensor decode_tensor(std::span<const uint8_t> bytes) {
    ByteReader r(bytes);
    Tensor t = read_tensor(r);
    r.expect_end();
    return t;
}

}  // namespace swarm::transport
