#include "awmark/image.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>

#include <jpeglib.h>
#include <png.h>

namespace awmark {

namespace fs = std::filesystem;

Image Image::zeros(int h, int w, int c) {
    if (h < 1 || w < 1 || c < 1) throw std::invalid_argument("Image: non-positive dimensions");
    Image img;
    img.h = h;
    img.w = w;
    img.c = c;
    img.px.assign(static_cast<std::size_t>(h) * w * c, 0.0);
    return img;
}

bool Image::in_range() const {
    for (double v : px)
        if (!(v >= 0.0 && v <= 1.0)) return false;
    return true;
}

Tensor to_chw(const Image& img, bool requires_grad) {
    Tensor t = Tensor::zeros({img.c, img.h, img.w}, requires_grad);
    double* d = t.data();
    const std::int64_t hw = static_cast<std::int64_t>(img.h) * img.w;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch)
                d[ch * hw + static_cast<std::int64_t>(y) * img.w + x] = img.at(y, x, ch);
    return t;
}

Image from_chw(const Tensor& t) {
    if (t.shape().size() != 3)
        throw std::invalid_argument("from_chw: expected [C,H,W], got " + shape_str(t.shape()));
    Image img = Image::zeros(t.dim(1), t.dim(2), t.dim(0));
    const double* d = t.data();
    const std::int64_t hw = static_cast<std::int64_t>(img.h) * img.w;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch)
                img.at(y, x, ch) = d[ch * hw + static_cast<std::int64_t>(y) * img.w + x];
    return img;
}

double psnr(const Image& a, const Image& b) {
    if (a.h != b.h || a.w != b.w || a.c != b.c)
        throw std::invalid_argument("psnr: image size mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.px.size(); ++i) {
        const double d = a.px[i] - b.px[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.px.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize: non-positive target size");
    if (out_h == img.h && out_w == img.w) return img;
    Image out = Image::zeros(out_h, out_w, img.c);
    const double sy = static_cast<double>(img.h) / out_h;
    const double sx = static_cast<double>(img.w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(img.h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(img.w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.w - 1);
            const double wx = fx - x0;
            for (int ch = 0; ch < img.c; ++ch) {
                const double top = img.at(y0, x0, ch) * (1.0 - wx) + img.at(y0, x1, ch) * wx;
                const double bot = img.at(y1, x0, ch) * (1.0 - wx) + img.at(y1, x1, ch) * wx;
                out.at(y, x, ch) = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    return out;
}

namespace {

std::uint8_t to_byte(double v) {
    const double s = std::round(v * 255.0);
    return static_cast<std::uint8_t>(std::clamp(s, 0.0, 255.0));
}

std::vector<std::uint8_t> to_rgb8(const Image& img) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(img.h) * img.w * 3);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < 3; ++ch)
                out[(static_cast<std::size_t>(y) * img.w + x) * 3 + ch] =
                    to_byte(img.at(y, x, img.c == 1 ? 0 : ch));
    return out;
}

}  // namespace

void write_png(const std::string& path, const Image& img) {
    if (img.c != 1 && img.c != 3) throw std::invalid_argument("write_png: need 1 or 3 channels");
    FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw std::runtime_error("write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("write_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw std::runtime_error("write_png: encode failed for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, img.w, img.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<std::uint8_t> rgb = to_rgb8(img);
    for (int y = 0; y < img.h; ++y)
        png_write_row(png, rgb.data() + static_cast<std::size_t>(y) * img.w * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

Image read_png(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("read_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("read_png: decode failed for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int w = static_cast<int>(png_get_image_width(png, info));
    std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
    for (int y = 0; y < h; ++y)
        png_read_row(png, rgb.data() + static_cast<std::size_t>(y) * w * 3, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    Image img = Image::zeros(h, w, 3);
    for (std::size_t i = 0; i < rgb.size(); ++i) img.px[i] = rgb[i] / 255.0;
    return img;
}

namespace {

struct JpegErrorMgr {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
    std::longjmp(mgr->jump, 1);
}

}  // namespace

std::vector<std::uint8_t> jpeg_encode(const Image& img, int quality) {
    if (quality < 1 || quality > 100)
        throw std::invalid_argument("jpeg_encode: quality must be in [1,100]");
    if (img.c != 3) throw std::invalid_argument("jpeg_encode: need 3 channels");

    jpeg_compress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.pub);
    err.pub.error_exit = jpeg_error_exit;
    unsigned char* buf = nullptr;
    unsigned long buf_size = 0;
    if (setjmp(err.jump)) {
        jpeg_destroy_compress(&cinfo);
        if (buf) free(buf);
        throw std::runtime_error("jpeg_encode: encode failed");
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &buf, &buf_size);
    cinfo.image_width = static_cast<JDIMENSION>(img.w);
    cinfo.image_height = static_cast<JDIMENSION>(img.h);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    // 4:4:4 so fidelity is controlled by the quality factor alone
    for (int c = 0; c < cinfo.num_components; ++c) {
        cinfo.comp_info[c].h_samp_factor = 1;
        cinfo.comp_info[c].v_samp_factor = 1;
    }
    jpeg_start_compress(&cinfo, TRUE);
    std::vector<std::uint8_t> rgb = to_rgb8(img);
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.next_scanline) * img.w * 3;
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    std::vector<std::uint8_t> out(buf, buf + buf_size);
    free(buf);
    return out;
}

Image jpeg_decode(const std::vector<std::uint8_t>& bytes) {
    jpeg_decompress_struct cinfo;
    JpegErrorMgr err;
    cinfo.err = jpeg_std_error(&err.pub);
    err.pub.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw std::runtime_error("jpeg_decode: decode failed");
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    const int h = static_cast<int>(cinfo.output_height);
    const int w = static_cast<int>(cinfo.output_width);
    Image img = Image::zeros(h, w, 3);
    std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        const int y = static_cast<int>(cinfo.output_scanline);
        JSAMPROW rp = row.data();
        jpeg_read_scanlines(&cinfo, &rp, 1);
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = row[x * 3 + ch] / 255.0;
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return img;
}

LabeledImages load_image_folder(const std::string& dir) {
    LabeledImages out;
    std::vector<fs::path> identities;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) identities.push_back(e.path());
    std::sort(identities.begin(), identities.end());
    if (identities.empty())
        throw std::runtime_error("load_image_folder: no identity subdirectories in " + dir);
    for (std::size_t id = 0; id < identities.size(); ++id) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(identities[id]))
            if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            Image img = read_png(f.string());
            out.images.push_back(resize_bilinear(img, 112, 112));
            out.labels.push_back(static_cast<int>(id));
        }
        out.identity_names.push_back(identities[id].filename().string());
    }
    return out;
}

}  // namespace awmark
