# Services package 