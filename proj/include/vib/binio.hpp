#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace vib::binio {

// Little-endian writers/readers for the checkpoint and feature file formats.
// Readers throw FormatError(kTruncated) when the stream runs dry.

void write_u8(std::ostream& out, std::uint8_t v);
void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_f64(std::ostream& out, double v);
void write_f64s(std::ostream& out, std::span<const double> values);
void write_magic(std::ostream& out, const char (&magic)[5]);

std::uint8_t read_u8(std::istream& in);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
double read_f64(std::istream& in);
void read_f64s(std::istream& in, std::span<double> values);
// Throws FormatError(kBadMagic) on mismatch.
void expect_magic(std::istream& in, const char (&magic)[5]);

std::vector<char> read_file(const std::string& path);
// 64-bit FNV-1a, used for artifact fingerprints in reports.
std::uint64_t fnv1a(std::span<const char> bytes);
std::string hex64(std::uint64_t v);
std::uint64_t file_hash(const std::string& path);

}  // namespace vib::binio
