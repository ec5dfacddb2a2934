# Package initializer for PixelSoul module
