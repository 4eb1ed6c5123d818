#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "railnet/errors.hpp"

namespace railnet {

// One detected defect, as it travels over the wire.
struct FaultReport {
  uint16_t device_id = 0;
  uint64_t timestamp_ms = 0;       // Unix epoch milliseconds
  uint64_t track_position_mm = 0;  // odometer position along the track
  uint8_t class_id = 0;
  uint16_t confidence_bp = 0;      // basis points, 0..10000

  friend bool operator==(const FaultReport&, const FaultReport&) = default;
};

// Frame layout (big-endian throughout):
//   magic 0x52 0x46 | version 1B | type 1B | length 2B | payload | crc16 2B
// crc16 = CRC-16/CCITT-FALSE over version..payload. A report frame carries a
// 21-byte payload (device 2, timestamp 8, position 8, class 1, confidence 2)
// for 29 bytes total; an ack (type 2) carries the 2 CRC bytes of the frame
// it acknowledges.
inline constexpr uint8_t kFrameMagic0 = 0x52;
inline constexpr uint8_t kFrameMagic1 = 0x46;
inline constexpr uint8_t kFrameVersion = 1;
inline constexpr uint8_t kFrameTypeReport = 1;
inline constexpr uint8_t kFrameTypeAck = 2;
inline constexpr size_t kReportFrameSize = 29;
inline constexpr size_t kAckFrameSize = 10;

// Standard CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection,
// xorout 0 (check value over "123456789" is 0x29B1).
uint16_t crc16_ccitt_false(const uint8_t* data, size_t len);

enum class FrameError {
  BadMagic,
  BadVersion,
  BadLength,
  BadCrc,
  BadType,
  BadField,
};

class FrameDecodeError : public DataError {
 public:
  FrameDecodeError(FrameError kind, const std::string& msg)
      : DataError(msg), kind_(kind) {}
  FrameError kind() const { return kind_; }

 private:
  FrameError kind_;
};

// Header + payload + stored CRC of one structurally valid frame.
struct FrameView {
  uint8_t version = 0;
  uint8_t type = 0;
  std::vector<uint8_t> payload;
  uint16_t crc = 0;
};

std::vector<uint8_t> encode_frame(const FaultReport& r);
std::vector<uint8_t> encode_ack(uint16_t acked_crc);

// Validate magic, version, length (the buffer must be exactly one frame),
// and CRC, in that order. Throws FrameDecodeError.
FrameView parse_frame(const uint8_t* data, size_t len);

// parse_frame + require a report-type frame and a well-formed payload.
FaultReport decode_frame(const std::vector<uint8_t>& bytes);

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

// TCP report sink. Accepts any number of connections; each valid frame is
// appended to a JSON-lines log (single serialized writer) and answered with
// an ack carrying the frame's CRC. Invalid frames get no ack and do not
// close the connection.
class ReportServer {
 public:
  // port 0 picks an ephemeral port (see port() after start()).
  ReportServer(std::string host, uint16_t port, std::string log_path);
  ~ReportServer();

  ReportServer(const ReportServer&) = delete;
  ReportServer& operator=(const ReportServer&) = delete;

  void start();  // throws DataError if the address cannot be bound
  void stop();   // idempotent

  uint16_t port() const { return port_; }
  const std::string& log_path() const { return log_path_; }
  bool log_failed() const { return log_failed_.load(); }

 private:
  void accept_loop();
  void serve_client(int fd);
  void append_log_line(const std::string& line);

  std::string host_;
  uint16_t port_;
  std::string log_path_;
  int listen_fd_ = -1;
  std::atomic<bool> running_{false};
  std::atomic<bool> log_failed_{false};
  std::thread accept_thread_;
  std::mutex clients_mu_;
  std::vector<std::thread> client_threads_;
  std::vector<int> client_fds_;
  std::mutex log_mu_;
};

// Send one report and wait for its ack. Throws DataError with distinct
// messages for connection failure, timeout, and a non-matching ack.
void send_report(const std::string& host, uint16_t port, const FaultReport& r,
                 int timeout_ms);

// ---------------------------------------------------------------------------
// Log reading
// ---------------------------------------------------------------------------

struct LogEntry {
  FaultReport report;
  uint64_t received_at_ms = 0;
};

struct ReportFilter {
  std::optional<int> class_id;
  std::optional<uint64_t> from_ms;  // inclusive, on timestamp_ms
  std::optional<uint64_t> to_ms;    // inclusive
};

struct ReportList {
  std::vector<LogEntry> entries;  // sorted by timestamp_ms
  std::vector<std::pair<long, std::string>> malformed;  // line number, error
};

ReportList list_reports(const std::string& log_path, const ReportFilter& filter);

}  // namespace railnet
